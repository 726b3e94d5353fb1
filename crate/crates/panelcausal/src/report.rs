//! Serialization and display of Monte Carlo reports and single-dataset
//! estimate bundles: the machine-readable CSVs keep full precision, the text
//! table applies the reference display conventions.

use std::io::Write;

use serde::Serialize;

use crate::estimators::EstimatorTag;
use crate::inference::BootstrapCI;
use crate::simgen::{MonteCarloReport, ReportRow};

/// Columns of the Monte Carlo CSV, in order.
pub const MONTECARLO_CSV_COLUMNS: [&str; 12] = [
    "mechanism",
    "gamma_set",
    "n",
    "estimator",
    "scenario",
    "R",
    "bias",
    "mse",
    "variance",
    "mean_events_a0",
    "mean_events_a1",
    "failures",
];

/// Shortest round-trip decimal rendering of a float (what both CSVs use, so
/// repeated runs are byte-identical and parsing loses nothing).
fn full_precision(x: f64) -> String {
    format!("{x}")
}

/// Writes the aggregate report as CSV with [`MONTECARLO_CSV_COLUMNS`].
pub fn write_montecarlo_csv<W: Write>(report: &MonteCarloReport, writer: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(MONTECARLO_CSV_COLUMNS)?;
    for row in &report.rows {
        out.write_record([
            row.mechanism.clone(),
            row.gamma_set.clone(),
            row.n.to_string(),
            row.estimator.to_string(),
            row.scenario.clone(),
            row.replicates.to_string(),
            full_precision(row.bias),
            full_precision(row.mse),
            full_precision(row.variance),
            full_precision(row.mean_events_a0),
            full_precision(row.mean_events_a1),
            row.failures.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the raw per-replicate estimates (one row per replicate per cell;
/// failed replicates keep their row with an empty `estimate`), ready for
/// external box plots.
pub fn write_replicates_csv<W: Write>(report: &MonteCarloReport, writer: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["mechanism", "gamma_set", "n", "estimator", "scenario", "replicate", "estimate"])?;
    for (row, estimates) in report.rows.iter().zip(&report.raw_estimates) {
        for (r, est) in estimates.iter().enumerate() {
            out.write_record([
                row.mechanism.clone(),
                row.gamma_set.clone(),
                row.n.to_string(),
                row.estimator.to_string(),
                row.scenario.clone(),
                r.to_string(),
                est.map(full_precision).unwrap_or_default(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// The reference table's row labels in its printed order, as
/// (label, estimator, scenario-tag) triples. "c" rows use the all-correct
/// scenario; "nc"/"ipt-only"/"iiv-only" rows borrow the robustness scenario
/// with the matching weight-model pattern.
const CANONICAL_ROWS: [(&str, EstimatorTag, &str); 12] = [
    ("OLS", EstimatorTag::Ols, "all"),
    ("IPTc", EstimatorTag::Ipt, "all"),
    ("IPTnc", EstimatorTag::Ipt, "b"),
    ("DWc", EstimatorTag::Fiptm, "all"),
    ("DWiptc", EstimatorTag::Fiptm, "d"),
    ("DWiivc", EstimatorTag::Fiptm, "c"),
    ("DWnc", EstimatorTag::Fiptm, "b"),
    ("AAIIWc", EstimatorTag::Aaiiw, "all"),
    ("AAIIWs.a", EstimatorTag::Aaiiw, "a"),
    ("AAIIWs.b", EstimatorTag::Aaiiw, "b"),
    ("AAIIWs.c", EstimatorTag::Aaiiw, "c"),
    ("AAIIWs.d", EstimatorTag::Aaiiw, "d"),
];

/// Reference display convention: magnitudes under 0.01 print as `<0.01`;
/// everything else keeps two decimals. Display-only — CSVs carry full
/// precision.
pub fn display_stat(x: f64) -> String {
    if x.abs() < 0.01 {
        "<0.01".into()
    } else {
        format!("{x:.2}")
    }
}

/// Renders the report as a fixed-width text table: one block per
/// (mechanism, γ set, n) group, canonical estimator rows first in the
/// reference order, any remaining (estimator, scenario) cells after them.
pub fn render_table(report: &MonteCarloReport) -> String {
    let mut out = String::new();
    let mut groups: Vec<(String, String, usize)> = Vec::new();
    for row in &report.rows {
        let key = (row.mechanism.clone(), row.gamma_set.clone(), row.n);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    for (mechanism, gamma_set, n) in &groups {
        let rows: Vec<&ReportRow> = report
            .rows
            .iter()
            .filter(|r| &r.mechanism == mechanism && &r.gamma_set == gamma_set && r.n == *n)
            .collect();
        let r = rows[0].replicates;
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!(
            "== {mechanism} mechanism, coefficient set {gamma_set}, n={n}, R={r} ==\n"
        ));
        out.push_str(&format!(
            "   mean observed events/subject: untreated {:.2}, treated {:.2}\n\n",
            rows[0].mean_events_a0, rows[0].mean_events_a1
        ));
        out.push_str(&format!("   {:<10} {:>8} {:>8} {:>9}\n", "estimator", "bias", "MSE", "failures"));
        let mut printed = vec![false; rows.len()];
        for (label, estimator, scenario) in CANONICAL_ROWS {
            if let Some(pos) =
                rows.iter().position(|c| c.estimator == estimator && c.scenario == scenario)
            {
                let cell = rows[pos];
                printed[pos] = true;
                out.push_str(&format!(
                    "   {:<10} {:>8} {:>8} {:>9}\n",
                    label,
                    display_stat(cell.bias),
                    display_stat(cell.mse),
                    cell.failures
                ));
            }
        }
        for (pos, cell) in rows.iter().enumerate() {
            if !printed[pos] {
                out.push_str(&format!(
                    "   {:<10} {:>8} {:>8} {:>9}\n",
                    format!("{} ({})", cell.estimator, cell.scenario),
                    display_stat(cell.bias),
                    display_stat(cell.mse),
                    cell.failures
                ));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Estimate-mode document
// ---------------------------------------------------------------------------

/// Weight summaries attached to each weighted estimate.
#[derive(Debug, Clone, Serialize)]
pub struct WeightDiagnostics {
    pub stabilized: bool,
    pub clipped_count: usize,
    pub ipt_mean: f64,
    pub ipt_max: f64,
    pub iiv_mean: f64,
    pub iiv_max: f64,
    pub provenance: Vec<String>,
}

/// One estimator's results in the estimate-mode JSON document.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateRecord {
    pub estimator: EstimatorTag,
    pub beta0: f64,
    pub beta1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_ci: Option<BootstrapCI>,
    pub ee_residual: Vec<f64>,
    pub nuisance_provenance: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightDiagnostics>,
}

/// The full estimate-mode output document (`estimates.json`).
#[derive(Debug, Clone, Serialize)]
pub struct EstimatesDocument<C: Serialize> {
    /// The resolved experiment configuration that produced this document.
    pub config: C,
    pub n_subjects: usize,
    pub n_bins: usize,
    pub estimates: Vec<EstimateRecord>,
}
