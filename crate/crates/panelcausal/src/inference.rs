//! Uncertainty quantification and weighting diagnostics: plug-in asymptotic
//! variances for the doubly weighted and augmented estimators, a
//! subject-level (cluster) bootstrap for percentile intervals, and balance
//! tables for inspecting what the weights achieve.

use rayon::prelude::*;
use thiserror::Error;

use crate::estimators::{EstimatorError, MSMParams, WeightSet};
use crate::nuisance::{ObservationFit, PropensityFit};
use crate::panel::PanelDataset;
use crate::rng::{derive_stream, StreamDomain};
use crate::sums::StableSum;
use rand::Rng;

/// Errors raised by the inference layer.
#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("positivity violated at subject {subject}, bin {bin}")]
    PositivityViolation { subject: usize, bin: usize },
    #[error("arm {arm} has no observed outcomes to estimate a variance from")]
    EmptyArm { arm: u8 },
    #[error("{skipped} of {total} bootstrap resamples were degenerate (> 10% allowed)")]
    ResampleDegenerate { skipped: usize, total: usize },
    #[error("bootstrap needs at least 100 replicates, got {given}")]
    TooFewReplicates { given: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

// ---------------------------------------------------------------------------
// Asymptotic variances
// ---------------------------------------------------------------------------

/// Whether variance inputs come from the simulator's true surfaces or from
/// fitted nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlugInInputs {
    /// True nuisance functions (available in simulations only).
    Oracle,
    /// Fitted nuisance models.
    Fitted,
}

/// Per-cell propensity and observation-intensity surfaces feeding the
/// variance formulas.
#[derive(Debug, Clone)]
pub struct NuisanceSurfaces {
    e1: Vec<f64>,
    rho: Vec<f64>,
    plug_in: PlugInInputs,
}

impl NuisanceSurfaces {
    /// Oracle surfaces straight from a simulator (flat per-cell values).
    pub fn from_oracle(e1: Vec<f64>, rho: Vec<f64>) -> Self {
        NuisanceSurfaces { e1, rho, plug_in: PlugInInputs::Oracle }
    }

    /// Surfaces evaluated from fitted nuisance models.
    pub fn from_fits(ds: &PanelDataset, prop: &PropensityFit, obs: &ObservationFit) -> Self {
        let mut e1 = vec![0.5; ds.n_cells()];
        let mut rho = vec![0.0; ds.n_cells()];
        for i in 0..ds.n_subjects() {
            for t in 0..ds.n_bins() {
                let cell = ds.idx(i, t);
                e1[cell] = prop.e1(ds, i, t);
                rho[cell] = obs.rho(ds, i, t);
            }
        }
        NuisanceSurfaces { e1, rho, plug_in: PlugInInputs::Fitted }
    }

    pub fn plug_in(&self) -> PlugInInputs {
        self.plug_in
    }
}

/// Plug-in asymptotic variances of the doubly weighted and augmented
/// estimators.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct VarianceEstimate {
    pub sigma2_fiptm: f64,
    pub sigma2_aaiiw: f64,
    pub plug_in_inputs: PlugInInputs,
}

/// Evaluates the plug-in variance formulas.
///
/// `σ̂²_FIPTM` sums, over arms, the empirical mean over observed arm-`a` bins
/// of `(Y − μ̂ₐ)² / (ρ·eₐ)`; `σ̂²_AAIIW` subtracts `μ̂₁²·Ê[(1+e₁)/e₁] +
/// μ̂₀²·Ê[(1+e₀)/e₀]`, the expectations being empirical means over at-risk
/// person-bins. With any nonzero arm mean the subtracted terms are strictly
/// positive, so `σ̂²_AAIIW < σ̂²_FIPTM` by construction — the efficiency gain
/// of augmentation at the plug-in level.
pub fn asymptotic_variances(
    ds: &PanelDataset,
    surfaces: &NuisanceSurfaces,
    params: MSMParams,
) -> Result<VarianceEstimate, InferenceError> {
    let mut arm_sums = [StableSum::new(), StableSum::new()];
    let mut arm_counts = [0usize; 2];
    let mut penalty_sums = [StableSum::new(), StableSum::new()];
    let mut risk_bins = 0usize;
    for i in 0..ds.n_subjects() {
        for t in 0..ds.n_bins() {
            if !ds.at_risk(i, t) {
                continue;
            }
            let cell = ds.idx(i, t);
            let e1 = surfaces.e1[cell];
            if e1 <= 0.0 || e1 >= 1.0 {
                return Err(InferenceError::PositivityViolation { subject: i, bin: t });
            }
            risk_bins += 1;
            penalty_sums[0].add((1.0 + (1.0 - e1)) / (1.0 - e1));
            penalty_sums[1].add((1.0 + e1) / e1);
            if let Some(y) = ds.outcome(i, t) {
                let rho = surfaces.rho[cell];
                if rho <= 0.0 {
                    return Err(InferenceError::PositivityViolation { subject: i, bin: t });
                }
                let arm = ds.treatment(i, t) as usize;
                let e_a = if arm == 1 { e1 } else { 1.0 - e1 };
                let dev = y - params.arm_mean(arm as u8);
                arm_sums[arm].add(dev * dev / (rho * e_a));
                arm_counts[arm] += 1;
            }
        }
    }
    for arm in 0..2 {
        if arm_counts[arm] == 0 {
            return Err(InferenceError::EmptyArm { arm: arm as u8 });
        }
    }
    let sigma2_fiptm = arm_sums[0].value() / arm_counts[0] as f64
        + arm_sums[1].value() / arm_counts[1] as f64;
    let mu0 = params.arm_mean(0);
    let mu1 = params.arm_mean(1);
    let denom = risk_bins as f64;
    let sigma2_aaiiw = sigma2_fiptm
        - mu1 * mu1 * penalty_sums[1].value() / denom
        - mu0 * mu0 * penalty_sums[0].value() / denom;
    Ok(VarianceEstimate {
        sigma2_fiptm,
        sigma2_aaiiw,
        plug_in_inputs: surfaces.plug_in,
    })
}

// ---------------------------------------------------------------------------
// Cluster bootstrap
// ---------------------------------------------------------------------------

/// Percentile bootstrap confidence interval.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BootstrapCI {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// Number of successful (non-degenerate) resamples behind the interval.
    pub replicates: usize,
    pub seed: u64,
}

/// A full estimator recipe, re-run on every resample: returns the statistic
/// of interest (usually β̂₁), or `None` when the resample is degenerate for
/// the recipe (an arm or the event set vanished, a fit separated, …).
pub type EstimatePipeline<'a> = dyn Fn(&PanelDataset) -> Option<f64> + Sync + 'a;

/// Raw bootstrap estimates, one per replicate index (in replicate order;
/// `None` marks degenerate resamples). Subjects are resampled with
/// replacement; replicate `b` draws its indices from an RNG stream derived
/// from `(seed, b)`, so results are identical regardless of scheduling.
pub fn bootstrap_estimates(
    ds: &PanelDataset,
    pipeline: &EstimatePipeline<'_>,
    b: usize,
    seed: u64,
) -> Vec<Option<f64>> {
    let n = ds.n_subjects();
    (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = derive_stream(seed, StreamDomain::Bootstrap, &[rep as u64]);
            let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let resample = ds.resample_subjects(&indices);
            pipeline(&resample)
        })
        .collect()
}

/// Percentile confidence interval from a subject-level bootstrap at the 95%
/// level. Degenerate resamples are skipped; more than 10% of them is an
/// error. Fully deterministic given `seed`.
pub fn bootstrap_ci(
    ds: &PanelDataset,
    pipeline: &EstimatePipeline<'_>,
    b: usize,
    seed: u64,
) -> Result<BootstrapCI, InferenceError> {
    bootstrap_ci_with_level(ds, pipeline, b, seed, 0.95)
}

/// [`bootstrap_ci`] at an arbitrary confidence level in (0, 1).
pub fn bootstrap_ci_with_level(
    ds: &PanelDataset,
    pipeline: &EstimatePipeline<'_>,
    b: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapCI, InferenceError> {
    ci_from_bootstrap(&bootstrap_estimates(ds, pipeline, b, seed), level, seed)
}

/// Percentile interval from already-computed bootstrap estimates (`None`
/// entries mark skipped degenerate resamples). Lets callers that evaluate
/// several estimators on shared resamples build one CI per estimator without
/// re-running the resampling. Same validity rules as [`bootstrap_ci`].
pub fn ci_from_bootstrap(
    raw: &[Option<f64>],
    level: f64,
    seed: u64,
) -> Result<BootstrapCI, InferenceError> {
    let b = raw.len();
    if b < 100 {
        return Err(InferenceError::TooFewReplicates { given: b });
    }
    let mut estimates: Vec<f64> = raw.iter().filter_map(|x| *x).collect();
    let skipped = b - estimates.len();
    if skipped * 10 > b {
        return Err(InferenceError::ResampleDegenerate { skipped, total: b });
    }
    estimates.sort_by(|a, b| a.partial_cmp(b).expect("estimates are finite"));
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCI {
        lower: sorted_quantile(&estimates, alpha),
        upper: sorted_quantile(&estimates, 1.0 - alpha),
        level,
        replicates: estimates.len(),
        seed,
    })
}

/// Multi-output variant of [`bootstrap_estimates`]: the pipeline returns one
/// value per requested output (e.g. one per estimator), sharing resamples and
/// nuisance fits within each replicate. Returns one vector per output, each
/// of length `b`; a pipeline returning the wrong arity panics.
pub fn bootstrap_estimates_multi(
    ds: &PanelDataset,
    pipeline: &(dyn Fn(&PanelDataset) -> Vec<Option<f64>> + Sync),
    n_outputs: usize,
    b: usize,
    seed: u64,
) -> Vec<Vec<Option<f64>>> {
    let n = ds.n_subjects();
    let per_replicate: Vec<Vec<Option<f64>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = derive_stream(seed, StreamDomain::Bootstrap, &[rep as u64]);
            let indices: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            let resample = ds.resample_subjects(&indices);
            let values = pipeline(&resample);
            assert_eq!(values.len(), n_outputs, "pipeline output arity");
            values
        })
        .collect();
    let mut by_output = vec![Vec::with_capacity(b); n_outputs];
    for replicate in per_replicate {
        for (k, v) in replicate.into_iter().enumerate() {
            by_output[k].push(v);
        }
    }
    by_output
}

/// Type-7 quantile of an already-sorted slice.
fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

// ---------------------------------------------------------------------------
// Balance diagnostics
// ---------------------------------------------------------------------------

/// Which binary variable defines the two strata of a balance table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyBy {
    /// Compare covariates between treatment arms (uses the IPT weights).
    Treatment,
    /// Compare covariates between observed and unobserved bins (uses the IIV
    /// weights).
    Observed,
}

/// One covariate-by-stratum summary row.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub stratum: String,
    pub unweighted_mean: f64,
    pub unweighted_sd: f64,
    pub weighted_mean: f64,
    pub weighted_sd: f64,
    pub n: usize,
}

/// Covariate summaries by stratum, weighted and unweighted side by side.
#[derive(Debug, Clone)]
pub struct BalanceTable {
    pub stratify_by: StratifyBy,
    pub rows: Vec<BalanceRow>,
}

impl BalanceTable {
    /// Writes the table as CSV with columns
    /// `covariate, stratum, unweighted_mean, unweighted_sd, weighted_mean,
    /// weighted_sd, n`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record([
            "covariate",
            "stratum",
            "unweighted_mean",
            "unweighted_sd",
            "weighted_mean",
            "weighted_sd",
            "n",
        ])?;
        for row in &self.rows {
            out.write_record([
                row.covariate.clone(),
                row.stratum.clone(),
                format!("{}", row.unweighted_mean),
                format!("{}", row.unweighted_sd),
                format!("{}", row.weighted_mean),
                format!("{}", row.weighted_sd),
                row.n.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Builds the balance table over at-risk person-bins.
///
/// Every covariate column (confounders, mediators, pure predictors) gets one
/// row per stratum. With `weights = None` the weighted columns repeat the
/// unweighted ones; otherwise the IPT weights apply when stratifying by
/// treatment and the IIV weights when stratifying by observation. Weighted
/// SDs use frequency-weight normalization (`Σw − 1`), so unit weights
/// reproduce the classical sample SD exactly.
pub fn balance_table(
    ds: &PanelDataset,
    weights: Option<&WeightSet>,
    stratify_by: StratifyBy,
) -> BalanceTable {
    struct Acc {
        values: Vec<f64>,
        weights: Vec<f64>,
    }
    let covariates: Vec<(String, Box<dyn Fn(&PanelDataset, usize, usize) -> f64>)> = {
        let mut cols: Vec<(String, Box<dyn Fn(&PanelDataset, usize, usize) -> f64>)> = Vec::new();
        for (j, name) in ds.confounder_names().iter().enumerate() {
            cols.push((name.clone(), Box::new(move |d, i, t| d.confounder(i, t, j))));
        }
        for (j, name) in ds.mediator_names().iter().enumerate() {
            cols.push((name.clone(), Box::new(move |d, i, t| d.mediator(i, t, j))));
        }
        for (j, name) in ds.pure_predictor_names().iter().enumerate() {
            cols.push((name.clone(), Box::new(move |d, i, t| d.pure_predictor(i, t, j))));
        }
        cols
    };
    let stratum_of = |i: usize, t: usize| -> usize {
        match stratify_by {
            StratifyBy::Treatment => ds.treatment(i, t) as usize,
            StratifyBy::Observed => ds.observed(i, t) as usize,
        }
    };
    let weight_of = |i: usize, t: usize| -> f64 {
        match (weights, stratify_by) {
            (None, _) => 1.0,
            (Some(w), StratifyBy::Treatment) => w.ipt(i, t),
            (Some(w), StratifyBy::Observed) => w.iiv(i, t),
        }
    };
    let mut rows = Vec::new();
    for (name, value_fn) in &covariates {
        let mut acc = [
            Acc { values: Vec::new(), weights: Vec::new() },
            Acc { values: Vec::new(), weights: Vec::new() },
        ];
        for i in 0..ds.n_subjects() {
            for t in 0..ds.n_bins() {
                if !ds.at_risk(i, t) {
                    continue;
                }
                let s = stratum_of(i, t);
                acc[s].values.push(value_fn(ds, i, t));
                acc[s].weights.push(weight_of(i, t));
            }
        }
        for (s, a) in acc.iter().enumerate() {
            if a.values.is_empty() {
                continue;
            }
            let (um, usd) = mean_sd(&a.values, None);
            let (wm, wsd) = mean_sd(&a.values, Some(&a.weights));
            let stratum = match stratify_by {
                StratifyBy::Treatment => format!("treatment={s}"),
                StratifyBy::Observed => format!("observed={s}"),
            };
            rows.push(BalanceRow {
                covariate: name.clone(),
                stratum,
                unweighted_mean: um,
                unweighted_sd: usd,
                weighted_mean: wm,
                weighted_sd: wsd,
                n: a.values.len(),
            });
        }
    }
    BalanceTable { stratify_by, rows }
}

/// Mean and SD, optionally frequency-weighted (`Σw − 1` in the SD
/// denominator so unit weights give the sample SD).
fn mean_sd(values: &[f64], weights: Option<&[f64]>) -> (f64, f64) {
    let w_at = |i: usize| weights.map_or(1.0, |w| w[i]);
    let mut sum_w = StableSum::new();
    let mut sum_wx = StableSum::new();
    for (i, &x) in values.iter().enumerate() {
        sum_w.add(w_at(i));
        sum_wx.add(w_at(i) * x);
    }
    let total_w = sum_w.value();
    let mean = sum_wx.value() / total_w;
    let mut ss = StableSum::new();
    for (i, &x) in values.iter().enumerate() {
        ss.add(w_at(i) * (x - mean) * (x - mean));
    }
    let denom = total_w - 1.0;
    let sd = if denom > 0.0 { (ss.value() / denom).sqrt() } else { 0.0 };
    (mean, sd)
}
