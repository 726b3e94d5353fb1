//! Experiment configuration: one JSON file drives either a single-dataset
//! estimation or a full Monte Carlo experiment. The command-line binary is a
//! thin shell over [`run_from_file`].
//!
//! Exit-code contract: 0 success, 1 configuration error (parse failure,
//! invalid or conflicting fields, missing referenced paths), 2 runtime
//! estimation failure (nuisance fits, estimators, or failure thresholds).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::estimators::{
    compute_weights, estimate_aaiiw, estimate_fiptm, estimate_iiv, estimate_ipt, estimate_ols,
    ClipBounds, EstimateResult, EstimatorTag, WeightSet,
};
use crate::inference::{
    balance_table, bootstrap_estimates_multi, ci_from_bootstrap, BalanceTable, BootstrapCI,
    StratifyBy,
};
use crate::nuisance::MeanPooling;
use crate::panel::{load_panel_csv, CsvSchema, DesignSpec, PanelDataset};
use crate::report::{
    render_table, write_montecarlo_csv, write_replicates_csv, EstimateRecord, EstimatesDocument,
    WeightDiagnostics,
};
use crate::simgen::{
    run_monte_carlo_with_recipes, scenario_nuisance_suite, DGPConfig, MonteCarloReport,
    NuisanceRecipes, NuisanceSuite, ObservationModelKind, ScenarioSpec,
};

/// Marker line that introduces the resolved configuration embedded in
/// `summary.txt`; everything after it is the pretty-printed JSON config, so
/// the report can be reproduced from its own summary file.
pub const CONFIG_EMBED_MARKER: &str = "## resolved config (JSON)";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 1: the configuration cannot be run as written.
    Config { message: String },
    /// Exit code 2: the configuration was valid but estimation failed.
    Runtime { message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Runtime { .. } => 2,
        }
    }

    fn config(message: impl Into<String>) -> Self {
        CliError::Config { message: message.into() }
    }

    fn runtime(message: impl Into<String>) -> Self {
        CliError::Runtime { message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config { message } => write!(f, "configuration error: {message}"),
            CliError::Runtime { message } => write!(f, "estimation error: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

// ---------------------------------------------------------------------------
// Configuration types
// ---------------------------------------------------------------------------

/// Which of the two pipelines a config runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Estimate,
    Simulate,
}

/// Percentile-bootstrap settings for estimate mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Number of subject-level resamples (minimum 100).
    pub replicates: usize,
    /// Confidence level in (0, 1).
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_level() -> f64 {
    0.95
}

fn default_true() -> bool {
    true
}

/// The analysis models fit in estimate mode. All four nuisance designs are
/// required; they are fit whenever any weighted estimator is requested (an
/// OLS-only run fits nothing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisDesigns {
    pub observation_model: ObservationModelKind,
    /// Treatment-propensity design (baseline confounders only).
    pub propensity: DesignSpec,
    /// Observation-intensity design (no intercept under proportional rates).
    pub intensity: DesignSpec,
    /// Confounder-conditional outcome-mean design.
    pub mu_k: DesignSpec,
    /// Full-history outcome-mean design (confounders + mediators).
    pub mu_v: DesignSpec,
    #[serde(default)]
    pub mu_pooling: MeanPooling,
    /// Weight the outcome-mean regressions by inverse fitted intensity.
    #[serde(default = "default_true")]
    pub mu_intensity_weighted: bool,
    /// Stabilize weights by marginal numerators. Incompatible with the
    /// augmented estimator, which needs the raw inverse weights.
    #[serde(default)]
    pub stabilized_weights: bool,
    /// Quantile clipping bounds for the weights; `[0, 1]` disables.
    #[serde(default)]
    pub clip: ClipBounds,
}

impl AnalysisDesigns {
    fn recipes(&self) -> NuisanceRecipes {
        // Estimate mode has one design per model; the misspecified slots are
        // never consulted under the all-correct scenario but the struct
        // requires them, so they alias the single design.
        NuisanceRecipes {
            observation_model: self.observation_model,
            propensity_correct: self.propensity.clone(),
            propensity_misspecified: self.propensity.clone(),
            intensity_correct: self.intensity.clone(),
            intensity_misspecified: self.intensity.clone(),
            mu_k_correct: self.mu_k.clone(),
            mu_v_correct: self.mu_v.clone(),
            mu_misspecified: self.mu_k.clone(),
            mu_pooling: self.mu_pooling,
            mu_intensity_weighted: self.mu_intensity_weighted,
        }
    }
}

/// Estimate-mode settings: one observed panel in, `estimates.json` +
/// `balance.csv` + `summary.txt` out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    /// Long-format panel CSV (see the panel loader for the column contract).
    pub input: PathBuf,
    /// Column-to-block mapping and time grid for the input file.
    pub schema: CsvSchema,
    pub designs: AnalysisDesigns,
    pub estimators: Vec<EstimatorTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapConfig>,
}

/// Simulate-mode settings: Monte Carlo over one or more generator configs,
/// `montecarlo.csv` + `replicates.csv` + `summary.txt` out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Generator configurations, run in order and merged into one report.
    pub dgp: Vec<DGPConfig>,
    /// Scenario tags: any of `all`, `a`, `b`, `c`, `d`, `naive`.
    pub scenarios: Vec<String>,
    pub estimators: Vec<EstimatorTag>,
    /// Monte Carlo replicates per (config, scenario, estimator) cell.
    pub replicates: usize,
}

/// Top-level experiment description. Exactly one mode block may be populated,
/// and it must match `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Where output files land; may instead be supplied with `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
}

impl ExperimentConfig {
    /// Applies command-line overrides, producing the resolved config that is
    /// embedded in every report.
    pub fn resolve(mut self, out: Option<&Path>, seed: Option<u64>) -> Self {
        if let Some(dir) = out {
            self.output_dir = Some(dir.to_path_buf());
        }
        if let Some(s) = seed {
            self.base_seed = s;
        }
        self
    }

    /// Structural validation (no filesystem access).
    pub fn validate(&self) -> Result<(), CliError> {
        if self.estimate.is_some() && self.simulate.is_some() {
            return Err(CliError::config(
                "both `estimate` and `simulate` are populated; exactly one mode's fields may be set",
            ));
        }
        match self.mode {
            Mode::Estimate => {
                let est = self.estimate.as_ref().ok_or_else(|| {
                    CliError::config("mode is \"estimate\" but the `estimate` block is missing")
                })?;
                if est.estimators.is_empty() {
                    return Err(CliError::config("`estimate.estimators` is empty"));
                }
                if let Some(bc) = &est.bootstrap {
                    if bc.replicates < 100 {
                        return Err(CliError::config(format!(
                            "`estimate.bootstrap.replicates` is {}; at least 100 are required",
                            bc.replicates
                        )));
                    }
                    if !(bc.level > 0.0 && bc.level < 1.0) {
                        return Err(CliError::config(format!(
                            "`estimate.bootstrap.level` is {}; must lie in (0, 1)",
                            bc.level
                        )));
                    }
                }
            }
            Mode::Simulate => {
                let sim = self.simulate.as_ref().ok_or_else(|| {
                    CliError::config("mode is \"simulate\" but the `simulate` block is missing")
                })?;
                if sim.dgp.is_empty() {
                    return Err(CliError::config("`simulate.dgp` is empty"));
                }
                for (i, cfg) in sim.dgp.iter().enumerate() {
                    cfg.validate().map_err(|e| {
                        CliError::config(format!("`simulate.dgp[{i}]` is invalid: {e}"))
                    })?;
                }
                if sim.scenarios.is_empty() {
                    return Err(CliError::config("`simulate.scenarios` is empty"));
                }
                for tag in &sim.scenarios {
                    ScenarioSpec::from_tag(tag)
                        .map_err(|e| CliError::config(format!("`simulate.scenarios`: {e}")))?;
                }
                if sim.estimators.is_empty() {
                    return Err(CliError::config("`simulate.estimators` is empty"));
                }
                if sim.replicates == 0 {
                    return Err(CliError::config("`simulate.replicates` must be positive"));
                }
            }
        }
        if self.output_dir.is_none() {
            return Err(CliError::config(
                "no output directory: set `output_dir` in the config or pass --out",
            ));
        }
        Ok(())
    }

    /// Filesystem validation: referenced input paths must exist. The estimate
    /// input is canonicalized so the embedded resolved config reproduces the
    /// run from any working directory.
    pub fn validate_paths(&mut self) -> Result<(), CliError> {
        if let Some(est) = self.estimate.as_mut() {
            if !est.input.exists() {
                return Err(CliError::config(format!(
                    "`estimate.input` path does not exist: {}",
                    est.input.display()
                )));
            }
            est.input = est
                .input
                .canonicalize()
                .map_err(|e| CliError::config(format!("cannot resolve `estimate.input`: {e}")))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Files written by a successful run.
#[derive(Debug)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
}

/// Loads, resolves, validates and runs a config file. `jobs` bounds the
/// worker pool (`None` = one worker per core).
pub fn run_from_file(
    config_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    jobs: Option<usize>,
) -> Result<RunOutcome, CliError> {
    let text = std::fs::read_to_string(config_path).map_err(|e| {
        CliError::config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::config(format!("cannot parse config {}: {e}", config_path.display()))
    })?;
    run(config.resolve(out, seed), jobs)
}

/// Runs an already-loaded config (after applying overrides via
/// [`ExperimentConfig::resolve`]).
pub fn run(mut config: ExperimentConfig, jobs: Option<usize>) -> Result<RunOutcome, CliError> {
    config.validate()?;
    config.validate_paths()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::runtime(format!("cannot build worker pool: {e}")))?;
    let out_dir = config.output_dir.clone().expect("validated");
    std::fs::create_dir_all(&out_dir).map_err(|e| {
        CliError::config(format!("cannot create output directory {}: {e}", out_dir.display()))
    })?;
    pool.install(|| match config.mode {
        Mode::Simulate => run_simulate(&config, &out_dir),
        Mode::Estimate => run_estimate(&config, &out_dir),
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn pretty_config(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

fn run_simulate(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let sim = config.simulate.as_ref().expect("validated");
    let scenarios: Vec<ScenarioSpec> = sim
        .scenarios
        .iter()
        .map(|t| ScenarioSpec::from_tag(t))
        .collect::<Result<_, _>>()
        .expect("validated");
    let mut reports = Vec::new();
    for cfg in &sim.dgp {
        let recipes = NuisanceRecipes::for_mechanism(&cfg.observation);
        let report = run_monte_carlo_with_recipes(
            cfg,
            &scenarios,
            &sim.estimators,
            sim.replicates,
            config.base_seed,
            &recipes,
        )
        .map_err(|e| CliError::runtime(e.to_string()))?;
        reports.push(report);
    }
    let report = MonteCarloReport::merge(reports);

    let mut csv_bytes = Vec::new();
    write_montecarlo_csv(&report, &mut csv_bytes)
        .map_err(|e| CliError::runtime(format!("CSV serialization failed: {e}")))?;
    let montecarlo_path = out_dir.join("montecarlo.csv");
    write_bytes(&montecarlo_path, &csv_bytes)?;

    let mut rep_bytes = Vec::new();
    write_replicates_csv(&report, &mut rep_bytes)
        .map_err(|e| CliError::runtime(format!("CSV serialization failed: {e}")))?;
    let replicates_path = out_dir.join("replicates.csv");
    write_bytes(&replicates_path, &rep_bytes)?;

    let summary = format!(
        "{}\n{}\n{}\n",
        render_table(&report),
        CONFIG_EMBED_MARKER,
        pretty_config(config)
    );
    let summary_path = out_dir.join("summary.txt");
    write_bytes(&summary_path, summary.as_bytes())?;

    Ok(RunOutcome { files: vec![montecarlo_path, replicates_path, summary_path] })
}

/// Everything estimate mode fits once on the observed panel.
struct FittedAnalysis {
    suite: Option<NuisanceSuite>,
    weights: Option<WeightSet>,
}

fn fit_analysis(ds: &PanelDataset, designs: &AnalysisDesigns, tags: &[EstimatorTag]) -> Result<FittedAnalysis, String> {
    let needs_weights = tags.iter().any(|t| *t != EstimatorTag::Ols);
    if !needs_weights {
        return Ok(FittedAnalysis { suite: None, weights: None });
    }
    let suite = scenario_nuisance_suite(ds, &ScenarioSpec::all_correct(), &designs.recipes())
        .map_err(|e| format!("nuisance fitting failed: {e}"))?;
    let weights = compute_weights(
        ds,
        &suite.propensity,
        &suite.observation,
        designs.stabilized_weights,
        designs.clip,
    )
    .map_err(|e| format!("weight construction failed: {e}"))?;
    Ok(FittedAnalysis { suite: Some(suite), weights: Some(weights) })
}

fn estimate_one(
    ds: &PanelDataset,
    fitted: &FittedAnalysis,
    tag: EstimatorTag,
) -> Result<EstimateResult, String> {
    let result = match tag {
        EstimatorTag::Ols => estimate_ols(ds),
        _ => {
            let w = fitted.weights.as_ref().expect("weights fitted for weighted estimators");
            match tag {
                EstimatorTag::Ipt => estimate_ipt(ds, w),
                EstimatorTag::Iiv => estimate_iiv(ds, w),
                EstimatorTag::Fiptm => estimate_fiptm(ds, w),
                EstimatorTag::Aaiiw => {
                    let suite = fitted.suite.as_ref().expect("suite fitted");
                    estimate_aaiiw(
                        ds,
                        w,
                        [&suite.mu_k[0], &suite.mu_k[1]],
                        [&suite.mu_v[0], &suite.mu_v[1]],
                        &suite.observation,
                    )
                }
                EstimatorTag::Ols => unreachable!(),
            }
        }
    };
    result.map_err(|e| format!("{tag} estimation failed: {e}"))
}

fn weight_diagnostics(ds: &PanelDataset, w: &WeightSet) -> WeightDiagnostics {
    let mut ipt_sum = 0.0;
    let mut ipt_max = f64::NEG_INFINITY;
    let mut ipt_n = 0usize;
    let mut iiv_sum = 0.0;
    let mut iiv_max = f64::NEG_INFINITY;
    let mut iiv_n = 0usize;
    for i in 0..ds.n_subjects() {
        for t in 0..ds.n_bins() {
            if !ds.at_risk(i, t) {
                continue;
            }
            let ipt = w.ipt(i, t);
            ipt_sum += ipt;
            ipt_max = ipt_max.max(ipt);
            ipt_n += 1;
            if ds.observed(i, t) {
                let iiv = w.iiv(i, t);
                iiv_sum += iiv;
                iiv_max = iiv_max.max(iiv);
                iiv_n += 1;
            }
        }
    }
    WeightDiagnostics {
        stabilized: w.stabilized,
        clipped_count: w.clipped_count,
        ipt_mean: ipt_sum / ipt_n.max(1) as f64,
        ipt_max: if ipt_n == 0 { f64::NAN } else { ipt_max },
        iiv_mean: iiv_sum / iiv_n.max(1) as f64,
        iiv_max: if iiv_n == 0 { f64::NAN } else { iiv_max },
        provenance: w.provenance().to_vec(),
    }
}

fn run_estimate(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let est = config.estimate.as_ref().expect("validated");
    let ds = load_panel_csv(&est.input, &est.schema)
        .map_err(|e| CliError::runtime(format!("cannot load {}: {e}", est.input.display())))?;

    let fitted = fit_analysis(&ds, &est.designs, &est.estimators).map_err(CliError::runtime)?;
    let results: Vec<EstimateResult> = est
        .estimators
        .iter()
        .map(|&tag| estimate_one(&ds, &fitted, tag))
        .collect::<Result<_, _>>()
        .map_err(CliError::runtime)?;

    // One shared bootstrap: each resample refits every nuisance model and
    // evaluates all requested estimators, so CIs are comparable across
    // estimators and each model is refit exactly once per resample.
    let cis: Vec<Option<BootstrapCI>> = if let Some(bc) = est.bootstrap {
        let designs = est.designs.clone();
        let tags = est.estimators.clone();
        let pipeline = move |resample: &PanelDataset| -> Vec<Option<f64>> {
            match fit_analysis(resample, &designs, &tags) {
                Ok(f) => tags
                    .iter()
                    .map(|&tag| estimate_one(resample, &f, tag).ok().map(|r| r.params.beta1))
                    .collect(),
                Err(_) => vec![None; tags.len()],
            }
        };
        let per_tag = bootstrap_estimates_multi(
            &ds,
            &pipeline,
            est.estimators.len(),
            bc.replicates,
            config.base_seed,
        );
        per_tag
            .iter()
            .map(|raw| {
                ci_from_bootstrap(raw, bc.level, config.base_seed)
                    .map(Some)
                    .map_err(|e| CliError::runtime(format!("bootstrap failed: {e}")))
            })
            .collect::<Result<_, _>>()?
    } else {
        vec![None; est.estimators.len()]
    };

    let weights_diag = fitted.weights.as_ref().map(|w| weight_diagnostics(&ds, w));
    let records: Vec<EstimateRecord> = results
        .iter()
        .zip(&cis)
        .map(|(r, ci)| EstimateRecord {
            estimator: r.estimator_tag,
            beta0: r.params.beta0,
            beta1: r.params.beta1,
            bootstrap_ci: ci.clone(),
            ee_residual: r.ee_residual.clone(),
            nuisance_provenance: r.nuisance_provenance.clone(),
            weights: if r.estimator_tag == EstimatorTag::Ols {
                None
            } else {
                weights_diag.clone()
            },
        })
        .collect();

    let document = EstimatesDocument {
        config: config.clone(),
        n_subjects: ds.n_subjects(),
        n_bins: ds.n_bins(),
        estimates: records,
    };
    let json = serde_json::to_string_pretty(&document).expect("document serializes");
    let estimates_path = out_dir.join("estimates.json");
    write_bytes(&estimates_path, json.as_bytes())?;

    // Balance under both stratifications, concatenated; the stratum labels
    // (`treatment=…`, `observed=…`) keep the halves distinguishable.
    let tables = [
        balance_table(&ds, fitted.weights.as_ref(), StratifyBy::Treatment),
        balance_table(&ds, fitted.weights.as_ref(), StratifyBy::Observed),
    ];
    let balance_path = out_dir.join("balance.csv");
    write_bytes(&balance_path, &concat_balance_csv(&tables)?)?;

    let mut summary = String::new();
    summary.push_str(&format!(
        "estimates on {} ({} subjects, {} bins)\n\n",
        est.input.display(),
        ds.n_subjects(),
        ds.n_bins()
    ));
    summary.push_str(&format!("   {:<10} {:>12} {:>12} {:>26}\n", "estimator", "beta0", "beta1", "95% CI (beta1)"));
    for rec in &document.estimates {
        let ci = rec
            .bootstrap_ci
            .as_ref()
            .map(|c| format!("[{:.4}, {:.4}]", c.lower, c.upper))
            .unwrap_or_else(|| "-".into());
        summary.push_str(&format!(
            "   {:<10} {:>12.6} {:>12.6} {:>26}\n",
            rec.estimator.to_string(),
            rec.beta0,
            rec.beta1,
            ci
        ));
    }
    summary.push_str(&format!("\n{}\n{}\n", CONFIG_EMBED_MARKER, pretty_config(config)));
    let summary_path = out_dir.join("summary.txt");
    write_bytes(&summary_path, summary.as_bytes())?;

    Ok(RunOutcome { files: vec![estimates_path, balance_path, summary_path] })
}

fn concat_balance_csv(tables: &[BalanceTable; 2]) -> Result<Vec<u8>, CliError> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let to_runtime = |e: csv::Error| CliError::runtime(format!("CSV serialization failed: {e}"));
    out.write_record([
        "covariate",
        "stratum",
        "unweighted_mean",
        "unweighted_sd",
        "weighted_mean",
        "weighted_sd",
        "n",
    ])
    .map_err(to_runtime)?;
    for table in tables {
        for row in &table.rows {
            out.write_record([
                row.covariate.clone(),
                row.stratum.clone(),
                format!("{}", row.unweighted_mean),
                format!("{}", row.unweighted_sd),
                format!("{}", row.weighted_mean),
                format!("{}", row.weighted_sd),
                row.n.to_string(),
            ])
            .map_err(to_runtime)?;
        }
    }
    out.into_inner().map_err(|e| CliError::runtime(format!("CSV serialization failed: {e}")))
}

/// Extracts the embedded resolved config from a `summary.txt` produced by
/// [`run`], enabling the round-trip "re-run the report from its own summary".
pub fn config_from_summary(summary: &str) -> Result<ExperimentConfig, CliError> {
    let idx = summary
        .find(CONFIG_EMBED_MARKER)
        .ok_or_else(|| CliError::config("summary has no embedded config marker"))?;
    let json = &summary[idx + CONFIG_EMBED_MARKER.len()..];
    serde_json::from_str(json)
        .map_err(|e| CliError::config(format!("embedded config does not parse: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simulate_config() -> ExperimentConfig {
        ExperimentConfig {
            mode: Mode::Simulate,
            output_dir: Some(PathBuf::from("/tmp/out")),
            base_seed: 7,
            estimate: None,
            simulate: Some(SimulateConfig {
                dgp: vec![DGPConfig::bernoulli(100, 1, false).unwrap()],
                scenarios: vec!["all".into()],
                estimators: vec![EstimatorTag::Ols],
                replicates: 2,
            }),
        }
    }

    fn estimate_designs() -> AnalysisDesigns {
        AnalysisDesigns {
            observation_model: ObservationModelKind::BernoulliLogistic,
            propensity: DesignSpec::from_names(&["intercept", "K1"]),
            intensity: DesignSpec::from_names(&["intercept", "treatment", "K1"]),
            mu_k: DesignSpec::from_names(&["intercept", "treatment", "K1"]),
            mu_v: DesignSpec::from_names(&["intercept", "treatment", "K1"]),
            mu_pooling: MeanPooling::default(),
            mu_intensity_weighted: true,
            stabilized_weights: false,
            clip: ClipBounds::default(),
        }
    }

    #[test]
    fn minimal_simulate_json_parses_with_defaults() {
        let json = r#"{
            "mode": "simulate",
            "output_dir": "out",
            "base_seed": 42,
            "simulate": {
                "dgp": [{
                    "n": 50,
                    "observation": {"mechanism": "bernoulli",
                                    "gamma": [0.4, 0.0, 0.0, 0.0, 0.0, 0.0, -5.0]}
                }],
                "scenarios": ["all", "b"],
                "estimators": ["OLS", "AAIIW"],
                "replicates": 3
            }
        }"#;
        let config: ExperimentConfig = serde_json::from_str(json).unwrap();
        config.validate().unwrap();
        assert_eq!(config.simulate.as_ref().unwrap().dgp[0].n, 50);
        // Round-trips through serialization (what summary embedding relies on).
        let text = serde_json::to_string(&config).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn both_modes_populated_is_rejected_naming_fields() {
        let mut config = simulate_config();
        config.estimate = Some(EstimateConfig {
            input: PathBuf::from("panel.csv"),
            schema: CsvSchema {
                grid: crate::panel::TimeGrid::replication_default(),
                confounders: vec!["K1".into()],
                mediators: vec![],
                pure_predictors: vec![],
            },
            designs: estimate_designs(),
            estimators: vec![EstimatorTag::Ols],
            bootstrap: None,
        });
        let err = config.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let msg = err.to_string();
        assert!(msg.contains("`estimate`") && msg.contains("`simulate`"), "{msg}");
    }

    #[test]
    fn mode_block_mismatch_and_empty_lists_are_rejected() {
        let mut config = simulate_config();
        config.simulate = None;
        assert!(config.validate().unwrap_err().to_string().contains("simulate"));

        let mut config = simulate_config();
        config.simulate.as_mut().unwrap().scenarios = vec!["z".into()];
        assert!(config.validate().unwrap_err().to_string().contains("unknown scenario tag"));

        let mut config = simulate_config();
        config.simulate.as_mut().unwrap().estimators.clear();
        assert!(config.validate().unwrap_err().to_string().contains("estimators"));

        let mut config = simulate_config();
        config.output_dir = None;
        assert!(config.validate().unwrap_err().to_string().contains("--out"));
    }

    #[test]
    fn bootstrap_bounds_are_validated() {
        let mut config = simulate_config();
        config.mode = Mode::Estimate;
        config.simulate = None;
        config.estimate = Some(EstimateConfig {
            input: PathBuf::from("panel.csv"),
            schema: CsvSchema {
                grid: crate::panel::TimeGrid::replication_default(),
                confounders: vec!["K1".into()],
                mediators: vec![],
                pure_predictors: vec![],
            },
            designs: estimate_designs(),
            estimators: vec![EstimatorTag::Ols],
            bootstrap: Some(BootstrapConfig { replicates: 50, level: 0.95 }),
        });
        let msg = config.validate().unwrap_err().to_string();
        assert!(msg.contains("at least 100"), "{msg}");
        config.estimate.as_mut().unwrap().bootstrap = Some(BootstrapConfig { replicates: 200, level: 1.5 });
        assert!(config.validate().unwrap_err().to_string().contains("(0, 1)"));
    }

    #[test]
    fn resolve_applies_cli_overrides() {
        let config = simulate_config();
        let resolved = config.resolve(Some(Path::new("/elsewhere")), Some(99));
        assert_eq!(resolved.output_dir.as_deref(), Some(Path::new("/elsewhere")));
        assert_eq!(resolved.base_seed, 99);
    }

    #[test]
    fn missing_input_path_is_a_config_error() {
        let mut config = simulate_config();
        config.mode = Mode::Estimate;
        config.simulate = None;
        config.estimate = Some(EstimateConfig {
            input: PathBuf::from("/nonexistent/panel.csv"),
            schema: CsvSchema {
                grid: crate::panel::TimeGrid::replication_default(),
                confounders: vec!["K1".into()],
                mediators: vec![],
                pure_predictors: vec![],
            },
            designs: estimate_designs(),
            estimators: vec![EstimatorTag::Ols],
            bootstrap: None,
        });
        config.validate().unwrap();
        let err = config.validate_paths().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn summary_round_trip_recovers_config() {
        let config = simulate_config();
        let summary = format!("table\n\n{}\n{}\n", CONFIG_EMBED_MARKER, pretty_config(&config));
        let back = config_from_summary(&summary).unwrap();
        assert_eq!(back, config);
        assert!(config_from_summary("no marker here").is_err());
    }
}
