//! Working ("nuisance") model fitters: the logistic treatment propensity, the
//! observation process (proportional-rate model with a Breslow-type baseline,
//! or a per-bin logistic model), and the two conditional outcome means.
//!
//! All fitters are pure functions of their inputs and carry no shared mutable
//! state, so they can run concurrently on the same dataset. Misspecified
//! models are expressed entirely through [`DesignSpec`] descriptors (dropped
//! columns, transformed columns) — there are no special-cased "wrong model"
//! code paths.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::panel::{
    build_design, DesignSpec, PanelDataset, PanelError, ResolvedDesign, RowFilter,
};

/// Numerically stable logistic function.
#[inline]
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^eta)`.
#[inline]
fn softplus(eta: f64) -> f64 {
    eta.max(0.0) + (-eta.abs()).exp().ln_1p()
}

/// Errors raised by the nuisance fitters.
#[derive(Debug, Error)]
pub enum NuisanceError {
    /// Coefficients diverged (or labels were degenerate): perfect separation.
    #[error("perfect separation detected (coefficient magnitude {coef_norm:.3e})")]
    SeparationDetected { coef_norm: f64 },
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("no observed events in the dataset")]
    NoEvents,
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("need at least {needed} rows in the fitting stratum, found {got}")]
    InsufficientRows { needed: usize, got: usize },
    #[error("invalid design: {reason}")]
    InvalidDesign { reason: String },
    #[error("non-finite value in {what}")]
    NonFiniteInput { what: String },
    #[error(transparent)]
    Panel(#[from] PanelError),
}

const GRADIENT_TOL: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100;
const SEPARATION_NORM: f64 = 1e3;

/// Solves `a x = b` for symmetric positive-definite `a`.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(a.clone()).map(|ch| ch.solve(b))
}

/// Inverse of a symmetric positive-definite matrix, re-symmetrized.
fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = Cholesky::new(a.clone())?.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

/// A fitted (optionally weighted) logistic regression.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-abs component of the score at the returned coefficients.
    pub final_gradient_norm: f64,
    /// Inverse observed information at the solution (symmetric PSD).
    pub covariance: DMatrix<f64>,
    /// Log-likelihood after each accepted Newton step (index 0 = start);
    /// non-decreasing by construction (step-halving).
    pub log_lik_path: Vec<f64>,
    pub design_labels: Vec<String>,
}

impl LogisticFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.log_lik_path.last().expect("path never empty")
    }

    /// Predicted probability for one design row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let eta: f64 = row
            .iter()
            .zip(self.coefficients.iter())
            .map(|(x, b)| x * b)
            .sum();
        expit(eta)
    }
}

/// Weighted Bernoulli log-likelihood `Σᵢ wᵢ·(yᵢηᵢ − log(1+e^ηᵢ))` at
/// arbitrary coefficients (no fitting). Exposed so finite-difference oracles
/// can cross-check the analytic score.
pub fn logistic_log_likelihood(
    design: &DMatrix<f64>,
    labels: &[f64],
    weights: Option<&[f64]>,
    beta: &DVector<f64>,
) -> f64 {
    let weight_at = |i: usize| weights.map_or(1.0, |w| w[i]);
    let eta = design * beta;
    (0..design.nrows())
        .map(|i| weight_at(i) * (labels[i] * eta[i] - softplus(eta[i])))
        .sum()
}

/// Analytic score of [`logistic_log_likelihood`] at `beta`:
/// `Σᵢ wᵢ·(yᵢ − expit(ηᵢ))·xᵢ`.
pub fn logistic_score(
    design: &DMatrix<f64>,
    labels: &[f64],
    weights: Option<&[f64]>,
    beta: &DVector<f64>,
) -> DVector<f64> {
    logistic_score_info(design, labels, weights, beta).0
}

/// Score and observed information of the weighted Bernoulli log-likelihood.
fn logistic_score_info(
    design: &DMatrix<f64>,
    labels: &[f64],
    weights: Option<&[f64]>,
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = design.nrows();
    let p = design.ncols();
    let weight_at = |i: usize| weights.map_or(1.0, |w| w[i]);
    let eta = design * beta;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for i in 0..n {
        let w = weight_at(i);
        if w == 0.0 {
            continue;
        }
        let mu = expit(eta[i]);
        let resid = w * (labels[i] - mu);
        let curv = w * mu * (1.0 - mu);
        for j in 0..p {
            let xij = design[(i, j)];
            grad[j] += resid * xij;
            for k in j..p {
                info[(j, k)] += curv * xij * design[(i, k)];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            info[(j, k)] = info[(k, j)];
        }
    }
    (grad, info)
}

/// Maximizes the (weighted) Bernoulli log-likelihood by Newton–Raphson with
/// step-halving, starting from the zero vector.
///
/// `labels` must be 0/1; `weights`, when given, must be nonnegative and
/// aligned with the rows. Degenerate labels (all effectively one class) are
/// the limiting case of perfect separation and are reported as such up front;
/// during iteration, separation is flagged when the coefficient magnitude
/// exceeds 1e3.
pub fn fit_logistic(
    design: &DMatrix<f64>,
    labels: &[f64],
    weights: Option<&[f64]>,
) -> Result<LogisticFit, NuisanceError> {
    let n = design.nrows();
    let p = design.ncols();
    if labels.len() != n {
        return Err(NuisanceError::InvalidDesign {
            reason: format!("{n} design rows but {} labels", labels.len()),
        });
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(NuisanceError::InvalidDesign {
                reason: format!("{n} design rows but {} weights", w.len()),
            });
        }
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(NuisanceError::NonFiniteInput { what: "weights".into() });
        }
    }
    if design.iter().any(|x| !x.is_finite()) {
        return Err(NuisanceError::NonFiniteInput { what: "design matrix".into() });
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(NuisanceError::NonFiniteInput { what: "labels (must be 0/1)".into() });
    }
    let weight_at = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total_w: f64 = (0..n).map(weight_at).sum();
    // Normalizing the score by the mean weight makes the stopping rule (and
    // hence the whole iterate sequence) invariant to rescaling all weights by
    // a constant; Newton steps are already scale-invariant.
    let mean_w = (total_w / n.max(1) as f64).max(f64::MIN_POSITIVE);
    let mean_y: f64 = (0..n).map(|i| weight_at(i) * labels[i]).sum::<f64>() / total_w.max(f64::MIN_POSITIVE);
    if !(mean_y > 0.0 && mean_y < 1.0) {
        return Err(NuisanceError::SeparationDetected { coef_norm: f64::INFINITY });
    }

    let log_lik = |beta: &DVector<f64>| logistic_log_likelihood(design, labels, weights, beta);

    let mut beta = DVector::zeros(p);
    let mut ll = log_lik(&beta);
    let mut path = vec![ll];
    let mut iterations = 0;
    loop {
        let (grad, info) = logistic_score_info(design, labels, weights, &beta);
        let gnorm = grad.amax() / mean_w;
        if gnorm <= GRADIENT_TOL {
            let covariance = spd_inverse(&info).ok_or(NuisanceError::SingularInformation)?;
            return Ok(LogisticFit {
                coefficients: beta,
                converged: true,
                iterations,
                final_gradient_norm: gnorm,
                covariance,
                log_lik_path: path,
                design_labels: Vec::new(),
            });
        }
        if iterations >= MAX_ITERATIONS {
            return Err(NuisanceError::NotConverged { iterations, gradient_norm: gnorm });
        }
        let delta = solve_spd(&info, &grad).ok_or(NuisanceError::SingularInformation)?;
        // Step-halving keeps the log-likelihood non-decreasing.
        let mut step = 1.0;
        let (next, ll_next) = loop {
            let cand = &beta + &delta * step;
            let ll_cand = log_lik(&cand);
            if ll_cand >= ll - 1e-12 * (1.0 + ll.abs()) {
                break (cand, ll_cand);
            }
            step *= 0.5;
            if step < 1e-10 {
                return Err(NuisanceError::NotConverged { iterations, gradient_norm: gnorm });
            }
        };
        beta = next;
        ll = ll_next;
        path.push(ll);
        iterations += 1;
        if beta.amax() > SEPARATION_NORM {
            return Err(NuisanceError::SeparationDetected { coef_norm: beta.amax() });
        }
    }
}

// ---------------------------------------------------------------------------
// Treatment propensity
// ---------------------------------------------------------------------------

/// Logistic propensity fit bound to its design, for per-bin prediction.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub logistic: LogisticFit,
    design: ResolvedDesign,
}

impl PropensityFit {
    /// Predicted probability of treatment arm 1 at (subject, bin).
    #[inline]
    pub fn e1(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        let mut eta = 0.0;
        for j in 0..self.design.n_columns() {
            eta += self.design.value(ds, i, t, j, None) * self.logistic.coefficients[j];
        }
        expit(eta)
    }

    pub fn design_labels(&self) -> &[String] {
        &self.logistic.design_labels
    }
}

/// Pooled-over-bins logistic fit of treatment on a confounder design,
/// restricted to at-risk person-bins. The design may reference only the
/// intercept and (possibly transformed) confounder columns.
pub fn fit_propensity(
    ds: &PanelDataset,
    confounder_spec: &DesignSpec,
) -> Result<PropensityFit, NuisanceError> {
    let design = confounder_spec.resolve(ds)?;
    if design.references_treatment()
        || design.references_mediators()
        || design.references_pure_predictors()
    {
        return Err(NuisanceError::InvalidDesign {
            reason: "propensity design may reference only intercept and confounders".into(),
        });
    }
    let (x, rows) = build_design(ds, &design, RowFilter::AtRisk);
    let labels: Vec<f64> = rows.iter().map(|&(i, t)| ds.treatment(i, t)).collect();
    let mut logistic = fit_logistic(&x, &labels, None)?;
    logistic.design_labels = design.labels().to_vec();
    Ok(PropensityFit { logistic, design })
}

// ---------------------------------------------------------------------------
// Observation process: proportional rate model (Andersen–Gill)
// ---------------------------------------------------------------------------

/// Which denominator the Breslow-type baseline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BreslowVariant {
    /// Denominator sums `exp(γᵀV)` over the *event* bins at each time — the
    /// formula exactly as displayed in the source method. Default.
    #[default]
    AsWritten,
    /// Denominator sums `exp(γᵀV)` over the *at-risk* bins at each time — the
    /// classical estimator.
    RiskSet,
}

/// A fitted proportional-rate observation model with per-bin baseline.
///
/// `gamma` has no intercept (the baseline absorbs scale); the per-bin
/// `baseline` values absorb the bin width, so `rho(i, t) = baseline[t] ·
/// exp(γᵀV)` is directly the modeled per-bin observation intensity.
#[derive(Debug, Clone)]
pub struct RateFit {
    pub gamma: DVector<f64>,
    pub baseline: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-abs component of the partial-likelihood score at `gamma`.
    pub final_gradient_norm: f64,
    /// Log partial likelihood after each accepted Newton step; non-decreasing.
    pub log_lik_path: Vec<f64>,
    pub variant: BreslowVariant,
    pub design_labels: Vec<String>,
    design: ResolvedDesign,
}

impl RateFit {
    #[inline]
    pub fn linear_predictor(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        let mut eta = 0.0;
        for j in 0..self.design.n_columns() {
            eta += self.design.value(ds, i, t, j, None) * self.gamma[j];
        }
        eta
    }

    /// Modeled per-bin observation intensity `λ̂₀(t)·exp(γᵀV)`.
    #[inline]
    pub fn rho(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        self.baseline[t] * self.linear_predictor(ds, i, t).exp()
    }

    /// Baseline-free relative intensity `exp(γᵀV)`, for stabilized weights.
    #[inline]
    pub fn relative_intensity(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        self.linear_predictor(ds, i, t).exp()
    }
}

/// At-risk design rows grouped by bin, with event membership — the shared
/// substrate of the partial-likelihood value, score, and information.
struct RateData {
    /// Per bin: the design rows of every at-risk subject.
    risk_rows: Vec<Vec<Vec<f64>>>,
    /// Per bin: indices into `risk_rows[t]` that are events.
    event_rows: Vec<Vec<usize>>,
    p: usize,
}

impl RateData {
    fn collect(ds: &PanelDataset, design: &ResolvedDesign) -> Result<Self, NuisanceError> {
        let p = design.n_columns();
        let n_bins = ds.n_bins();
        let mut risk_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_bins];
        let mut event_rows: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
        let mut row = vec![0.0; p];
        for i in 0..ds.n_subjects() {
            for t in 0..n_bins {
                if !ds.at_risk(i, t) {
                    continue;
                }
                design.fill_row(ds, i, t, None, &mut row);
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(NuisanceError::NonFiniteInput { what: "visit design".into() });
                }
                if ds.observed(i, t) {
                    event_rows[t].push(risk_rows[t].len());
                }
                risk_rows[t].push(row.clone());
            }
        }
        let n_events: usize = event_rows.iter().map(|e| e.len()).sum();
        if n_events == 0 {
            return Err(NuisanceError::NoEvents);
        }
        Ok(RateData { risk_rows, event_rows, p })
    }

    fn log_lik(&self, gamma: &DVector<f64>) -> f64 {
        let mut ll = 0.0;
        for t in 0..self.risk_rows.len() {
            let d = self.event_rows[t].len();
            if d == 0 {
                continue;
            }
            let etas: Vec<f64> = self.risk_rows[t]
                .iter()
                .map(|v| v.iter().zip(gamma.iter()).map(|(x, g)| x * g).sum())
                .collect();
            let s0: f64 = etas.iter().map(|e| e.exp()).sum();
            for &e in &self.event_rows[t] {
                ll += etas[e];
            }
            ll -= d as f64 * s0.ln();
        }
        ll
    }

    fn score_info(&self, gamma: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.p;
        let mut grad = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for t in 0..self.risk_rows.len() {
            let d = self.event_rows[t].len();
            if d == 0 {
                continue;
            }
            let mut s0 = 0.0;
            let mut s1 = DVector::zeros(p);
            let mut s2 = DMatrix::zeros(p, p);
            for v in &self.risk_rows[t] {
                let eta: f64 = v.iter().zip(gamma.iter()).map(|(x, g)| x * g).sum();
                let ex = eta.exp();
                s0 += ex;
                for j in 0..p {
                    s1[j] += ex * v[j];
                    for k in j..p {
                        s2[(j, k)] += ex * v[j] * v[k];
                    }
                }
            }
            for j in 0..p {
                for k in 0..j {
                    s2[(j, k)] = s2[(k, j)];
                }
            }
            let sbar = &s1 / s0;
            for &e in &self.event_rows[t] {
                for j in 0..p {
                    grad[j] += self.risk_rows[t][e][j];
                }
            }
            grad -= &sbar * d as f64;
            info += (s2 / s0 - &sbar * sbar.transpose()) * d as f64;
        }
        (grad, info)
    }
}

/// Log partial likelihood of the proportional-rate model at arbitrary `gamma`
/// (no fitting; same design rules as [`fit_proportional_rate`]). Exposed so
/// finite-difference oracles can cross-check the analytic score.
pub fn rate_log_partial_likelihood(
    ds: &PanelDataset,
    visit_spec: &DesignSpec,
    gamma: &DVector<f64>,
) -> Result<f64, NuisanceError> {
    Ok(rate_eval_data(ds, visit_spec, gamma)?.log_lik(gamma))
}

/// Analytic score of the log partial likelihood at arbitrary `gamma`.
pub fn rate_score(
    ds: &PanelDataset,
    visit_spec: &DesignSpec,
    gamma: &DVector<f64>,
) -> Result<DVector<f64>, NuisanceError> {
    Ok(rate_eval_data(ds, visit_spec, gamma)?.score_info(gamma).0)
}

fn rate_eval_data(
    ds: &PanelDataset,
    visit_spec: &DesignSpec,
    gamma: &DVector<f64>,
) -> Result<RateData, NuisanceError> {
    let design = visit_spec.resolve(ds)?;
    if design.has_intercept() {
        return Err(NuisanceError::InvalidDesign {
            reason: "proportional-rate design must not contain an intercept (absorbed by the baseline)".into(),
        });
    }
    if gamma.len() != design.n_columns() {
        return Err(NuisanceError::InvalidDesign {
            reason: format!(
                "gamma has {} entries but the design has {} columns",
                gamma.len(),
                design.n_columns()
            ),
        });
    }
    RateData::collect(ds, &design)
}

/// Maximizes the Andersen–Gill log partial likelihood over at-risk
/// person-bins (events are bins with `observed = 1`; the risk set at a bin
/// index is every at-risk bin at that index; ties use the Breslow
/// approximation), then fills the baseline via [`breslow_baseline`].
///
/// The visit design may reference treatment, mediators, confounders, and pure
/// predictors, but not an intercept — a multiplicative constant is not
/// identified separately from the baseline.
pub fn fit_proportional_rate(
    ds: &PanelDataset,
    visit_spec: &DesignSpec,
    variant: BreslowVariant,
) -> Result<RateFit, NuisanceError> {
    let design = visit_spec.resolve(ds)?;
    if design.has_intercept() {
        return Err(NuisanceError::InvalidDesign {
            reason: "proportional-rate design must not contain an intercept (absorbed by the baseline)".into(),
        });
    }
    let data = RateData::collect(ds, &design)?;
    let p = design.n_columns();
    let log_lik = |gamma: &DVector<f64>| data.log_lik(gamma);

    let mut gamma = DVector::zeros(p);
    let mut ll = log_lik(&gamma);
    let mut path = vec![ll];
    let mut iterations = 0;
    loop {
        let (grad, info) = data.score_info(&gamma);
        let gnorm = grad.amax();
        if gnorm <= GRADIENT_TOL {
            let baseline = breslow_baseline(ds, &design, &gamma, variant);
            return Ok(RateFit {
                gamma,
                baseline,
                converged: true,
                iterations,
                final_gradient_norm: gnorm,
                log_lik_path: path,
                variant,
                design_labels: design.labels().to_vec(),
                design,
            });
        }
        if iterations >= MAX_ITERATIONS {
            return Err(NuisanceError::NotConverged { iterations, gradient_norm: gnorm });
        }
        let delta = solve_spd(&info, &grad).ok_or(NuisanceError::SingularInformation)?;
        let mut step = 1.0;
        let (next, ll_next) = loop {
            let cand = &gamma + &delta * step;
            let ll_cand = log_lik(&cand);
            if ll_cand >= ll - 1e-12 * (1.0 + ll.abs()) {
                break (cand, ll_cand);
            }
            step *= 0.5;
            if step < 1e-10 {
                return Err(NuisanceError::NotConverged { iterations, gradient_norm: gnorm });
            }
        };
        gamma = next;
        ll = ll_next;
        path.push(ll);
        iterations += 1;
        if gamma.amax() > SEPARATION_NORM {
            return Err(NuisanceError::SeparationDetected { coef_norm: gamma.amax() });
        }
    }
}

/// Per-bin baseline rate.
///
/// With `AsWritten`, `λ̂₀(t) = Σᵢ 1{dNᵢ(t)=1} / Σᵢ 1{dNᵢ(t)=1}·exp(γᵀVᵢ(t))` —
/// the denominator sums over the event bins themselves, exactly as the method
/// displays it. With `RiskSet`, the denominator sums `exp(γᵀVᵢ(t))` over every
/// at-risk bin at `t` (the classical estimator). Bins with no events get 0.
pub fn breslow_baseline(
    ds: &PanelDataset,
    visit_design: &ResolvedDesign,
    gamma: &DVector<f64>,
    variant: BreslowVariant,
) -> Vec<f64> {
    let n_bins = ds.n_bins();
    let mut baseline = vec![0.0; n_bins];
    for t in 0..n_bins {
        let mut events = 0.0;
        let mut denom = 0.0;
        for i in 0..ds.n_subjects() {
            if !ds.at_risk(i, t) {
                continue;
            }
            let is_event = ds.observed(i, t);
            if is_event {
                events += 1.0;
            }
            let include = match variant {
                BreslowVariant::AsWritten => is_event,
                BreslowVariant::RiskSet => true,
            };
            if include {
                let mut eta = 0.0;
                for j in 0..visit_design.n_columns() {
                    eta += visit_design.value(ds, i, t, j, None) * gamma[j];
                }
                denom += eta.exp();
            }
        }
        if events > 0.0 {
            baseline[t] = events / denom;
        }
    }
    baseline
}

// ---------------------------------------------------------------------------
// Observation process: per-bin Bernoulli (logistic) model
// ---------------------------------------------------------------------------

/// Logistic observation-probability fit bound to its design.
#[derive(Debug, Clone)]
pub struct BernoulliObservationFit {
    pub logistic: LogisticFit,
    design: ResolvedDesign,
}

impl BernoulliObservationFit {
    /// Modeled per-bin observation probability.
    #[inline]
    pub fn rho(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        let mut eta = 0.0;
        for j in 0..self.design.n_columns() {
            eta += self.design.value(ds, i, t, j, None) * self.logistic.coefficients[j];
        }
        expit(eta)
    }
}

/// Logistic fit of the observation indicator on a visit design over at-risk
/// person-bins (used when observation times are modeled per bin rather than
/// through a rate model).
pub fn fit_bernoulli_observation(
    ds: &PanelDataset,
    visit_spec: &DesignSpec,
) -> Result<BernoulliObservationFit, NuisanceError> {
    let design = visit_spec.resolve(ds)?;
    let (x, rows) = build_design(ds, &design, RowFilter::AtRisk);
    let labels: Vec<f64> = rows
        .iter()
        .map(|&(i, t)| ds.observed(i, t) as u8 as f64)
        .collect();
    let mut logistic = fit_logistic(&x, &labels, None)?;
    logistic.design_labels = design.labels().to_vec();
    Ok(BernoulliObservationFit { logistic, design })
}

/// Either observation-process fit, unified behind a per-bin intensity.
#[derive(Debug, Clone)]
pub enum ObservationFit {
    Rate(RateFit),
    Bernoulli(BernoulliObservationFit),
}

impl ObservationFit {
    /// Modeled per-bin observation intensity/probability ρ̂(i, t).
    #[inline]
    pub fn rho(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        match self {
            ObservationFit::Rate(fit) => fit.rho(ds, i, t),
            ObservationFit::Bernoulli(fit) => fit.rho(ds, i, t),
        }
    }

    /// Baseline-free relative intensity, defined only for the rate model.
    #[inline]
    pub fn relative_intensity(&self, ds: &PanelDataset, i: usize, t: usize) -> Option<f64> {
        match self {
            ObservationFit::Rate(fit) => Some(fit.relative_intensity(ds, i, t)),
            ObservationFit::Bernoulli(_) => None,
        }
    }

    pub fn design_labels(&self) -> &[String] {
        match self {
            ObservationFit::Rate(fit) => &fit.design_labels,
            ObservationFit::Bernoulli(fit) => &fit.logistic.design_labels,
        }
    }
}

// ---------------------------------------------------------------------------
// Conditional outcome means
// ---------------------------------------------------------------------------

/// Which covariate block the outcome mean conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningBlock {
    /// μ_a{K(t)}: confounders only (plus treatment and any pure predictors
    /// the design includes).
    KConditional,
    /// μ_a{V(t)}: the full visit-process block including mediators.
    VConditional,
}

/// How the arm-specific mean is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanPooling {
    /// One regression pooled across arms with treatment in the design,
    /// evaluated at A = a. Default: stabilizes small arms.
    #[default]
    PooledWithTreatment,
    /// Separate regression per arm (sensitivity option).
    StratifiedByArm,
}

/// A fitted conditional-outcome-mean regression, evaluated at a fixed arm.
#[derive(Debug, Clone)]
pub struct OutcomeMeanFit {
    pub arm: u8,
    pub conditioning: ConditioningBlock,
    pub coefficients: DVector<f64>,
    pub design_labels: Vec<String>,
    pub pooling: MeanPooling,
    /// Whether inverse-intensity weights were used in the fit.
    pub weighted: bool,
    design: ResolvedDesign,
}

impl OutcomeMeanFit {
    /// Predicted mean at (subject, bin) with the treatment column forced to
    /// this fit's arm.
    #[inline]
    pub fn predict(&self, ds: &PanelDataset, i: usize, t: usize) -> f64 {
        let arm = Some(self.arm as f64);
        let mut y = 0.0;
        for j in 0..self.design.n_columns() {
            y += self.design.value(ds, i, t, j, arm) * self.coefficients[j];
        }
        y
    }
}

/// Least-squares fit of the observed outcomes on a design formula.
///
/// Rows are the observed-outcome person-bins: pooled across arms (with the
/// design free to include the treatment column) or restricted to `arm` when
/// stratified. `iiv_weights`, when given, is a flat per-cell vector of
/// inverse-intensity weights applied to the rows used — fitting the mean
/// under the observation process's reweighting; `None` fits unweighted.
pub fn fit_outcome_mean(
    ds: &PanelDataset,
    arm: u8,
    conditioning: ConditioningBlock,
    spec: &DesignSpec,
    pooling: MeanPooling,
    iiv_weights: Option<&[f64]>,
) -> Result<OutcomeMeanFit, NuisanceError> {
    if arm > 1 {
        return Err(NuisanceError::InvalidDesign { reason: format!("arm must be 0/1, got {arm}") });
    }
    if let Some(w) = iiv_weights {
        if w.len() != ds.n_cells() {
            return Err(NuisanceError::InvalidDesign {
                reason: format!("expected {} per-cell weights, got {}", ds.n_cells(), w.len()),
            });
        }
    }
    let design = spec.resolve(ds)?;
    let filter = match pooling {
        MeanPooling::PooledWithTreatment => RowFilter::Observed,
        MeanPooling::StratifiedByArm => RowFilter::ObservedInArm(arm),
    };
    let (x, rows) = build_design(ds, &design, filter);
    let needed = design.n_columns() + 1;
    if rows.len() < needed {
        return Err(NuisanceError::InsufficientRows { needed, got: rows.len() });
    }
    let y: Vec<f64> = rows
        .iter()
        .map(|&(i, t)| ds.outcome(i, t).expect("observed rows carry outcomes"))
        .collect();
    let w: Vec<f64> = match iiv_weights {
        Some(weights) => rows
            .iter()
            .map(|&(i, t)| weights[ds.idx(i, t)])
            .collect(),
        None => vec![1.0; rows.len()],
    };
    if w.iter().any(|&wi| !wi.is_finite() || wi < 0.0) {
        return Err(NuisanceError::NonFiniteInput { what: "outcome-mean weights".into() });
    }
    let p = design.n_columns();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for r in 0..rows.len() {
        let wr = w[r];
        for j in 0..p {
            let xj = x[(r, j)];
            xtwy[j] += wr * xj * y[r];
            for k in j..p {
                xtwx[(j, k)] += wr * xj * x[(r, k)];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            xtwx[(j, k)] = xtwx[(k, j)];
        }
    }
    let coefficients = solve_spd(&xtwx, &xtwy).ok_or(NuisanceError::RankDeficientDesign)?;
    Ok(OutcomeMeanFit {
        arm,
        conditioning,
        coefficients,
        design_labels: design.labels().to_vec(),
        pooling,
        weighted: iiv_weights.is_some(),
        design,
    })
}
