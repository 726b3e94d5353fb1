//! Longitudinal panel data model shared by every other module.
//!
//! Data are long-format: one row per subject per time bin, carrying the
//! treatment indicator, three covariate blocks (confounders K, mediators M,
//! pure predictors P), an at-risk flag, the observation indicator, and the
//! outcome (present exactly when observed). Bins live on a regular
//! [`TimeGrid`]; continuous-time integrals elsewhere in the crate are bin sums
//! with the bin width absorbed into per-bin baseline quantities.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Regular time grid `[start, end]` divided into equal-width bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTimeGrid")]
pub struct TimeGrid {
    start: f64,
    end: f64,
    bin_width: f64,
}

/// Unvalidated mirror of [`TimeGrid`], so deserialization goes through
/// [`TimeGrid::new`] and rejects malformed grids at the config boundary.
#[derive(Deserialize)]
struct RawTimeGrid {
    start: f64,
    end: f64,
    bin_width: f64,
}

impl TryFrom<RawTimeGrid> for TimeGrid {
    type Error = PanelError;

    fn try_from(raw: RawTimeGrid) -> Result<Self, PanelError> {
        TimeGrid::new(raw.start, raw.end, raw.bin_width)
    }
}

impl TimeGrid {
    /// Builds a grid, checking `start < end`, `bin_width > 0`, and that the
    /// span is an integer number of bins (to within 1e-9 relative tolerance;
    /// unequal or non-conforming widths are rejected rather than guessed).
    pub fn new(start: f64, end: f64, bin_width: f64) -> Result<Self, PanelError> {
        if !(start < end) || !(bin_width > 0.0) || !start.is_finite() || !end.is_finite() {
            return Err(PanelError::InvalidGrid {
                reason: format!("need start < end and bin_width > 0, got [{start}, {end}] width {bin_width}"),
            });
        }
        let bins = (end - start) / bin_width;
        if (bins - bins.round()).abs() > 1e-9 * bins.max(1.0) {
            return Err(PanelError::InvalidGrid {
                reason: format!("({end} - {start}) / {bin_width} = {bins} is not an integer bin count"),
            });
        }
        Ok(TimeGrid { start, end, bin_width })
    }

    /// The default replication grid: `[0, 2]` in 20 bins of width 0.1.
    pub fn replication_default() -> Self {
        TimeGrid { start: 0.0, end: 2.0, bin_width: 0.1 }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn n_bins(&self) -> usize {
        ((self.end - self.start) / self.bin_width).round() as usize
    }

    /// Left edge of bin `t` (the time value used by time-dependent rates).
    pub fn left_edge(&self, t: usize) -> f64 {
        self.start + self.bin_width * t as f64
    }
}

/// Column blocks a covariate may belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateBlock {
    /// Confounders K: affect treatment and outcome.
    Confounder,
    /// Mediators M: on the treatment→outcome path.
    Mediator,
    /// Pure predictors P: predict the outcome only.
    PurePredictor,
}

/// Immutable long-format panel, stored column-major as flat `n_subjects ×
/// n_bins` arrays (plus a trailing within-block dimension for covariates).
///
/// Construction enforces shape consistency; semantic invariants (monotone
/// censoring, outcome present iff observed, identifiable arms) are checked by
/// [`validate_panel`], which reports violations as data rather than erroring.
///
/// Safe to share across threads by reference: nothing here is interior-mutable.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    grid: TimeGrid,
    subject_ids: Vec<String>,
    k_names: Vec<String>,
    m_names: Vec<String>,
    p_names: Vec<String>,
    /// 0.0 / 1.0 per subject-bin.
    treatment: Vec<f64>,
    /// 0 / 1 per subject-bin; monotone non-increasing within subject when valid.
    at_risk: Vec<u8>,
    /// dN: 0 / 1 per subject-bin.
    observed: Vec<u8>,
    /// Outcome; `NaN` encodes "absent" (valid exactly where observed = 1).
    outcome: Vec<f64>,
    /// Confounders, `[subject][bin][k_dim]` flattened.
    k: Vec<f64>,
    /// Mediators, `[subject][bin][m_dim]` flattened.
    m: Vec<f64>,
    /// Pure predictors, `[subject][bin][p_dim]` flattened.
    p: Vec<f64>,
}

impl PartialEq for PanelDataset {
    /// Structural equality; the NaN-coded outcome column is compared bitwise
    /// so that "absent" equals "absent".
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.subject_ids == other.subject_ids
            && self.k_names == other.k_names
            && self.m_names == other.m_names
            && self.p_names == other.p_names
            && self.treatment == other.treatment
            && self.at_risk == other.at_risk
            && self.observed == other.observed
            && self.outcome.len() == other.outcome.len()
            && self
                .outcome
                .iter()
                .zip(&other.outcome)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.k == other.k
            && self.m == other.m
            && self.p == other.p
    }
}

/// Everything needed to assemble a [`PanelDataset`] from flat columns.
pub struct PanelColumns {
    pub grid: TimeGrid,
    pub subject_ids: Vec<String>,
    pub k_names: Vec<String>,
    pub m_names: Vec<String>,
    pub p_names: Vec<String>,
    pub treatment: Vec<f64>,
    pub at_risk: Vec<u8>,
    pub observed: Vec<u8>,
    pub outcome: Vec<f64>,
    pub k: Vec<f64>,
    pub m: Vec<f64>,
    pub p: Vec<f64>,
}

impl PanelDataset {
    /// Assembles a panel from flat columns, checking shapes and binary coding
    /// (treatment/at_risk/observed) but not the semantic invariants.
    pub fn from_columns(c: PanelColumns) -> Result<Self, PanelError> {
        let n = c.subject_ids.len();
        let t = c.grid.n_bins();
        let cells = n * t;
        let shape_ok = c.treatment.len() == cells
            && c.at_risk.len() == cells
            && c.observed.len() == cells
            && c.outcome.len() == cells
            && c.k.len() == cells * c.k_names.len()
            && c.m.len() == cells * c.m_names.len()
            && c.p.len() == cells * c.p_names.len();
        if !shape_ok {
            return Err(PanelError::ShapeMismatch {
                subjects: n,
                bins: t,
            });
        }
        if let Some(bad) = c.treatment.iter().position(|&a| a != 0.0 && a != 1.0) {
            return Err(PanelError::NonBinaryValue {
                column: "treatment".into(),
                row: bad,
            });
        }
        for (name, vals) in [("at_risk", &c.at_risk), ("observed", &c.observed)] {
            if let Some(bad) = vals.iter().position(|&v| v > 1) {
                return Err(PanelError::NonBinaryValue {
                    column: name.into(),
                    row: bad,
                });
            }
        }
        Ok(PanelDataset {
            grid: c.grid,
            subject_ids: c.subject_ids,
            k_names: c.k_names,
            m_names: c.m_names,
            p_names: c.p_names,
            treatment: c.treatment,
            at_risk: c.at_risk,
            observed: c.observed,
            outcome: c.outcome,
            k: c.k,
            m: c.m,
            p: c.p,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.grid_ref()
    }

    fn grid_ref(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_bins(&self) -> usize {
        self.grid.n_bins()
    }

    pub fn n_cells(&self) -> usize {
        self.n_subjects() * self.n_bins()
    }

    /// Flat index of (subject, bin).
    #[inline]
    pub fn idx(&self, i: usize, t: usize) -> usize {
        i * self.n_bins() + t
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn confounder_names(&self) -> &[String] {
        &self.k_names
    }

    pub fn mediator_names(&self) -> &[String] {
        &self.m_names
    }

    pub fn pure_predictor_names(&self) -> &[String] {
        &self.p_names
    }

    #[inline]
    pub fn treatment(&self, i: usize, t: usize) -> f64 {
        self.treatment[self.idx(i, t)]
    }

    #[inline]
    pub fn at_risk(&self, i: usize, t: usize) -> bool {
        self.at_risk[self.idx(i, t)] == 1
    }

    #[inline]
    pub fn observed(&self, i: usize, t: usize) -> bool {
        self.observed[self.idx(i, t)] == 1
    }

    /// Outcome at (i, t); `None` when the bin was not observed.
    #[inline]
    pub fn outcome(&self, i: usize, t: usize) -> Option<f64> {
        let y = self.outcome[self.idx(i, t)];
        if y.is_nan() {
            None
        } else {
            Some(y)
        }
    }

    #[inline]
    pub fn confounder(&self, i: usize, t: usize, j: usize) -> f64 {
        self.k[(self.idx(i, t)) * self.k_names.len() + j]
    }

    #[inline]
    pub fn mediator(&self, i: usize, t: usize, j: usize) -> f64 {
        self.m[(self.idx(i, t)) * self.m_names.len() + j]
    }

    #[inline]
    pub fn pure_predictor(&self, i: usize, t: usize, j: usize) -> f64 {
        self.p[(self.idx(i, t)) * self.p_names.len() + j]
    }

    /// Flat treatment column (length `n_cells`).
    pub fn treatment_flat(&self) -> &[f64] {
        &self.treatment
    }

    /// Flat observation column (length `n_cells`).
    pub fn observed_flat(&self) -> &[u8] {
        &self.observed
    }

    /// Flat at-risk column (length `n_cells`).
    pub fn at_risk_flat(&self) -> &[u8] {
        &self.at_risk
    }

    /// Flat outcome column (`NaN` = absent, length `n_cells`).
    pub fn outcome_flat(&self) -> &[f64] {
        &self.outcome
    }

    /// New panel containing the given subjects (repeats allowed — used by the
    /// cluster bootstrap). Subject ids are re-labelled with a repeat suffix so
    /// they stay unique.
    pub fn resample_subjects(&self, indices: &[usize]) -> PanelDataset {
        let t = self.n_bins();
        let (kd, md, pd) = (self.k_names.len(), self.m_names.len(), self.p_names.len());
        let mut out = PanelDataset {
            grid: self.grid,
            subject_ids: Vec::with_capacity(indices.len()),
            k_names: self.k_names.clone(),
            m_names: self.m_names.clone(),
            p_names: self.p_names.clone(),
            treatment: Vec::with_capacity(indices.len() * t),
            at_risk: Vec::with_capacity(indices.len() * t),
            observed: Vec::with_capacity(indices.len() * t),
            outcome: Vec::with_capacity(indices.len() * t),
            k: Vec::with_capacity(indices.len() * t * kd),
            m: Vec::with_capacity(indices.len() * t * md),
            p: Vec::with_capacity(indices.len() * t * pd),
        };
        for (copy, &i) in indices.iter().enumerate() {
            out.subject_ids.push(format!("{}#{}", self.subject_ids[i], copy));
            let cells = i * t..(i + 1) * t;
            out.treatment.extend_from_slice(&self.treatment[cells.clone()]);
            out.at_risk.extend_from_slice(&self.at_risk[cells.clone()]);
            out.observed.extend_from_slice(&self.observed[cells.clone()]);
            out.outcome.extend_from_slice(&self.outcome[cells]);
            out.k.extend_from_slice(&self.k[i * t * kd..(i + 1) * t * kd]);
            out.m.extend_from_slice(&self.m[i * t * md..(i + 1) * t * md]);
            out.p.extend_from_slice(&self.p[i * t * pd..(i + 1) * t * pd]);
        }
        out
    }

    /// Subjects reordered by `perm` (a permutation of `0..n_subjects`).
    pub fn permute_subjects(&self, perm: &[usize]) -> PanelDataset {
        let mut out = self.resample_subjects(perm);
        for (slot, &i) in perm.iter().enumerate() {
            out.subject_ids[slot] = self.subject_ids[i].clone();
        }
        out
    }

    /// Number of observed events per arm, averaged per subject — the
    /// "(arm 0, arm 1)" pair reported alongside Monte Carlo cells.
    pub fn mean_events_per_arm(&self) -> (f64, f64) {
        let n = self.n_subjects() as f64;
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for i in 0..self.n_subjects() {
            for t in 0..self.n_bins() {
                if self.observed(i, t) {
                    if self.treatment(i, t) == 1.0 {
                        e1 += 1.0;
                    } else {
                        e0 += 1.0;
                    }
                }
            }
        }
        (e0 / n, e1 / n)
    }
}

/// Structural errors raised while building or loading panels.
#[derive(Debug, Error)]
pub enum PanelError {
    #[error("invalid time grid: {reason}")]
    InvalidGrid { reason: String },
    #[error("column lengths inconsistent with {subjects} subjects x {bins} bins")]
    ShapeMismatch { subjects: usize, bins: usize },
    #[error("non-binary value in column '{column}' at data row {row}")]
    NonBinaryValue { column: String, row: usize },
    #[error("missing required column '{column}'")]
    MissingColumn { column: String },
    #[error("could not parse '{value}' in column '{column}' at data row {row}")]
    ParseNumber { column: String, value: String, row: usize },
    #[error("outcome present but observed=0 at data row {row}")]
    OutcomePresentUnobserved { row: usize },
    #[error("outcome missing but observed=1 at data row {row}")]
    OutcomeMissingObserved { row: usize },
    #[error("duplicate (subject '{subject}', bin {bin}) at data row {row}")]
    DuplicateBin { subject: String, bin: usize, row: usize },
    #[error("subject '{subject}' is missing bin {bin} (grids must be complete)")]
    MissingBin { subject: String, bin: usize },
    #[error("bin index {bin} out of range for a {n_bins}-bin grid at data row {row}")]
    BinOutOfRange { bin: usize, n_bins: usize, row: usize },
    #[error("design column '{column}' not found in the dataset")]
    UnknownColumn { column: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Maps CSV covariate columns onto the K / M / P blocks and carries the time
/// grid (grid parameters are not encoded in the file itself).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub grid: TimeGrid,
    pub confounders: Vec<String>,
    pub mediators: Vec<String>,
    pub pure_predictors: Vec<String>,
}

const FIXED_COLUMNS: [&str; 6] = ["subject_id", "bin", "treatment", "at_risk", "observed", "outcome"];

/// Loads a long-format CSV (comma-delimited, UTF-8, header row required).
///
/// Required columns: `subject_id, bin, treatment, at_risk, observed, outcome`
/// (empty outcome = absent); covariate columns are assigned to blocks by the
/// schema. Rows may arrive in any order; they are normalized by (subject, bin).
/// Every subject must carry every bin exactly once — the long format keeps
/// covariates and at-risk flags available at all times, so a gap is a
/// structural error, not a missing-data condition.
pub fn load_panel_csv(path: &Path, schema: &CsvSchema) -> Result<PanelDataset, PanelError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| -> Result<usize, PanelError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::MissingColumn { column: name.into() })
    };
    let fixed: Vec<usize> = FIXED_COLUMNS
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let block_cols = |names: &[String]| -> Result<Vec<usize>, PanelError> {
        names.iter().map(|n| col(n)).collect()
    };
    let k_cols = block_cols(&schema.confounders)?;
    let m_cols = block_cols(&schema.mediators)?;
    let p_cols = block_cols(&schema.pure_predictors)?;

    struct RawRow {
        subject: String,
        bin: usize,
        treatment: f64,
        at_risk: u8,
        observed: u8,
        outcome: f64,
        k: Vec<f64>,
        m: Vec<f64>,
        p: Vec<f64>,
    }

    let n_bins = schema.grid.n_bins();
    let mut rows: Vec<RawRow> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse = |name: &str, i: usize| -> Result<f64, PanelError> {
            field(i).parse::<f64>().map_err(|_| PanelError::ParseNumber {
                column: name.into(),
                value: field(i).into(),
                row: row_no,
            })
        };
        let parse_binary = |name: &str, i: usize| -> Result<u8, PanelError> {
            match field(i) {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(PanelError::NonBinaryValue {
                    column: format!("{name} (value '{other}')"),
                    row: row_no,
                }),
            }
        };
        let bin_raw = parse("bin", fixed[1])?;
        if bin_raw < 0.0 || bin_raw.fract() != 0.0 {
            return Err(PanelError::ParseNumber {
                column: "bin".into(),
                value: field(fixed[1]).into(),
                row: row_no,
            });
        }
        let bin = bin_raw as usize;
        if bin >= n_bins {
            return Err(PanelError::BinOutOfRange { bin, n_bins, row: row_no });
        }
        let treatment = parse("treatment", fixed[2])?;
        if treatment != 0.0 && treatment != 1.0 {
            return Err(PanelError::NonBinaryValue { column: "treatment".into(), row: row_no });
        }
        let observed = parse_binary("observed", fixed[4])?;
        let outcome_field = field(fixed[5]);
        let outcome = if outcome_field.is_empty() {
            if observed == 1 {
                return Err(PanelError::OutcomeMissingObserved { row: row_no });
            }
            f64::NAN
        } else {
            if observed == 0 {
                return Err(PanelError::OutcomePresentUnobserved { row: row_no });
            }
            parse("outcome", fixed[5])?
        };
        let read_block = |cols: &[usize], names: &[String]| -> Result<Vec<f64>, PanelError> {
            cols.iter()
                .zip(names)
                .map(|(&i, name)| parse(name, i))
                .collect()
        };
        rows.push(RawRow {
            subject: field(fixed[0]).to_string(),
            bin,
            treatment,
            at_risk: parse_binary("at_risk", fixed[3])?,
            observed,
            outcome,
            k: read_block(&k_cols, &schema.confounders)?,
            m: read_block(&m_cols, &schema.mediators)?,
            p: read_block(&p_cols, &schema.pure_predictors)?,
        });
    }

    // Subjects in first-appearance order; rows normalized by bin within subject.
    let mut subject_order: Vec<String> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for r in &rows {
        if seen.insert(r.subject.clone()) {
            subject_order.push(r.subject.clone());
        }
    }
    let subject_slot: std::collections::HashMap<&str, usize> = subject_order
        .iter()
        .enumerate()
        .map(|(slot, s)| (s.as_str(), slot))
        .collect();

    let n = subject_order.len();
    let cells = n * n_bins;
    let (kd, md, pd) = (k_cols.len(), m_cols.len(), p_cols.len());
    let mut filled = vec![false; cells];
    let mut treatment = vec![0.0; cells];
    let mut at_risk = vec![0u8; cells];
    let mut observed = vec![0u8; cells];
    let mut outcome = vec![f64::NAN; cells];
    let mut k = vec![0.0; cells * kd];
    let mut m = vec![0.0; cells * md];
    let mut p = vec![0.0; cells * pd];
    for (row_no, r) in rows.iter().enumerate() {
        let slot = subject_slot[r.subject.as_str()];
        let cell = slot * n_bins + r.bin;
        if filled[cell] {
            return Err(PanelError::DuplicateBin {
                subject: r.subject.clone(),
                bin: r.bin,
                row: row_no,
            });
        }
        filled[cell] = true;
        treatment[cell] = r.treatment;
        at_risk[cell] = r.at_risk;
        observed[cell] = r.observed;
        outcome[cell] = r.outcome;
        k[cell * kd..(cell + 1) * kd].copy_from_slice(&r.k);
        m[cell * md..(cell + 1) * md].copy_from_slice(&r.m);
        p[cell * pd..(cell + 1) * pd].copy_from_slice(&r.p);
    }
    if let Some(missing) = filled.iter().position(|&f| !f) {
        return Err(PanelError::MissingBin {
            subject: subject_order[missing / n_bins].clone(),
            bin: missing % n_bins,
        });
    }

    PanelDataset::from_columns(PanelColumns {
        grid: schema.grid,
        subject_ids: subject_order,
        k_names: schema.confounders.clone(),
        m_names: schema.mediators.clone(),
        p_names: schema.pure_predictors.clone(),
        treatment,
        at_risk,
        observed,
        outcome,
        k,
        m,
        p,
    })
}

/// Writes a panel as long-format CSV, the inverse of [`load_panel_csv`].
/// Numeric fields use shortest round-trip formatting, so load→save→load is
/// the identity at full `f64` precision.
pub fn save_panel_csv(ds: &PanelDataset, path: &Path) -> Result<(), PanelError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(ds.k_names.iter().cloned());
    header.extend(ds.m_names.iter().cloned());
    header.extend(ds.p_names.iter().cloned());
    writer.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n_subjects() {
        for t in 0..ds.n_bins() {
            record.clear();
            record.push(ds.subject_ids[i].clone());
            record.push(t.to_string());
            record.push(format!("{}", ds.treatment(i, t)));
            record.push(format!("{}", ds.at_risk(i, t) as u8));
            record.push(format!("{}", ds.observed(i, t) as u8));
            record.push(match ds.outcome(i, t) {
                Some(y) => format!("{y}"),
                None => String::new(),
            });
            for j in 0..ds.k_names.len() {
                record.push(format!("{}", ds.confounder(i, t, j)));
            }
            for j in 0..ds.m_names.len() {
                record.push(format!("{}", ds.mediator(i, t, j)));
            }
            for j in 0..ds.p_names.len() {
                record.push(format!("{}", ds.pure_predictor(i, t, j)));
            }
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// One semantic invariant violation found by [`validate_panel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub subject: Option<String>,
    pub bin: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// at_risk rises again after a censored bin.
    CensoringNonMonotone,
    /// observed = 1 at a bin with at_risk = 0.
    ObservedWhileCensored,
    /// outcome present at a bin with observed = 0.
    OutcomeWithoutObservation,
    /// outcome absent at a bin with observed = 1.
    MissingOutcomeAtObservation,
    /// a treatment arm has no observed outcome anywhere.
    ArmUnidentifiable,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            ViolationKind::CensoringNonMonotone => "censoring non-monotone",
            ViolationKind::ObservedWhileCensored => "observed while censored",
            ViolationKind::OutcomeWithoutObservation => "outcome without observation",
            ViolationKind::MissingOutcomeAtObservation => "missing outcome at observation",
            ViolationKind::ArmUnidentifiable => "arm unidentifiable",
        };
        f.write_str(text)
    }
}

/// Result of [`validate_panel`]: empty iff every semantic invariant holds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the semantic invariants (monotone censoring, observed ⇒ at-risk,
/// outcome ⇔ observed, both arms identifiable). Pure: never mutates the input
/// and always returns the same report for the same dataset.
pub fn validate_panel(ds: &PanelDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut arm_seen = [false, false];
    for i in 0..ds.n_subjects() {
        let mut censored = false;
        for t in 0..ds.n_bins() {
            let at_risk = ds.at_risk(i, t);
            if censored && at_risk {
                report.violations.push(Violation {
                    kind: ViolationKind::CensoringNonMonotone,
                    subject: Some(ds.subject_ids[i].clone()),
                    bin: Some(t),
                });
            }
            if !at_risk {
                censored = true;
            }
            let observed = ds.observed(i, t);
            if observed && !at_risk {
                report.violations.push(Violation {
                    kind: ViolationKind::ObservedWhileCensored,
                    subject: Some(ds.subject_ids[i].clone()),
                    bin: Some(t),
                });
            }
            let has_outcome = ds.outcome(i, t).is_some();
            if has_outcome && !observed {
                report.violations.push(Violation {
                    kind: ViolationKind::OutcomeWithoutObservation,
                    subject: Some(ds.subject_ids[i].clone()),
                    bin: Some(t),
                });
            }
            if !has_outcome && observed {
                report.violations.push(Violation {
                    kind: ViolationKind::MissingOutcomeAtObservation,
                    subject: Some(ds.subject_ids[i].clone()),
                    bin: Some(t),
                });
            }
            if observed && has_outcome {
                arm_seen[ds.treatment(i, t) as usize] = true;
            }
        }
    }
    for (arm, seen) in arm_seen.iter().enumerate() {
        if !seen {
            report.violations.push(Violation {
                kind: ViolationKind::ArmUnidentifiable,
                subject: None,
                bin: Some(arm),
            });
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Design formulas
// ---------------------------------------------------------------------------

/// Transform applied to a design column. The closed set mirrors what the
/// experiment configs may request; misspecified nuisance models are expressed
/// entirely through these descriptors (dropped columns, distorted shapes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    Sine,
    Square,
    Log1p,
}

impl Transform {
    fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Sine => x.sin(),
            Transform::Square => x * x,
            Transform::Log1p => x.ln_1p(),
        }
    }

    fn label(self, column: &str) -> String {
        match self {
            Transform::Identity => column.to_string(),
            Transform::Sine => format!("sine({column})"),
            Transform::Square => format!("square({column})"),
            Transform::Log1p => format!("log1p({column})"),
        }
    }
}

/// One design column: a column name plus an optional transform. The reserved
/// names `"intercept"` and `"treatment"` address the constant column and the
/// treatment indicator; all other names resolve against the covariate blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub column: String,
    #[serde(default)]
    pub transform: Transform,
}

/// Declarative design formula: an ordered list of (column, transform) pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub columns: Vec<DesignColumn>,
}

impl DesignSpec {
    /// Builds a spec from identity-transformed column names.
    pub fn from_names(names: &[&str]) -> Self {
        DesignSpec {
            columns: names
                .iter()
                .map(|&column| DesignColumn { column: column.into(), transform: Transform::Identity })
                .collect(),
        }
    }

    /// Appends a transformed column.
    pub fn with(mut self, column: &str, transform: Transform) -> Self {
        self.columns.push(DesignColumn { column: column.into(), transform });
        self
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    /// Human-readable labels, e.g. `["intercept", "sine(K1)"]`.
    pub fn labels(&self) -> Vec<String> {
        self.columns
            .iter()
            .map(|c| c.transform.label(&c.column))
            .collect()
    }

    /// Whether the formula contains an intercept column.
    pub fn has_intercept(&self) -> bool {
        self.columns.iter().any(|c| c.column == "intercept")
    }

    /// Whether the formula references the treatment indicator.
    pub fn has_treatment(&self) -> bool {
        self.columns.iter().any(|c| c.column == "treatment")
    }

    /// Resolves column names against a dataset's blocks.
    pub fn resolve(&self, ds: &PanelDataset) -> Result<ResolvedDesign, PanelError> {
        let mut cols = Vec::with_capacity(self.columns.len());
        for c in &self.columns {
            let target = match c.column.as_str() {
                "intercept" => ResolvedColumn::Intercept,
                "treatment" => ResolvedColumn::Treatment,
                name => {
                    if let Some(j) = ds.k_names.iter().position(|k| k == name) {
                        ResolvedColumn::Confounder(j)
                    } else if let Some(j) = ds.m_names.iter().position(|m| m == name) {
                        ResolvedColumn::Mediator(j)
                    } else if let Some(j) = ds.p_names.iter().position(|p| p == name) {
                        ResolvedColumn::PurePredictor(j)
                    } else {
                        return Err(PanelError::UnknownColumn { column: name.into() });
                    }
                }
            };
            cols.push((target, c.transform));
        }
        Ok(ResolvedDesign { cols, labels: self.labels() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ResolvedColumn {
    Intercept,
    Treatment,
    Confounder(usize),
    Mediator(usize),
    PurePredictor(usize),
}

/// A design formula bound to a dataset's column layout.
#[derive(Debug, Clone)]
pub struct ResolvedDesign {
    cols: Vec<(ResolvedColumn, Transform)>,
    labels: Vec<String>,
}

impl ResolvedDesign {
    pub fn n_columns(&self) -> usize {
        self.cols.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn has_intercept(&self) -> bool {
        self.cols.iter().any(|(c, _)| *c == ResolvedColumn::Intercept)
    }

    pub fn references_treatment(&self) -> bool {
        self.cols.iter().any(|(c, _)| *c == ResolvedColumn::Treatment)
    }

    pub fn references_mediators(&self) -> bool {
        self.cols.iter().any(|(c, _)| matches!(c, ResolvedColumn::Mediator(_)))
    }

    pub fn references_pure_predictors(&self) -> bool {
        self.cols.iter().any(|(c, _)| matches!(c, ResolvedColumn::PurePredictor(_)))
    }

    /// Value of design column `j` at (subject, bin), optionally forcing the
    /// treatment indicator to a counterfactual arm (used when a pooled
    /// outcome-mean fit is evaluated at A = a).
    #[inline]
    pub fn value(
        &self,
        ds: &PanelDataset,
        i: usize,
        t: usize,
        j: usize,
        treatment_override: Option<f64>,
    ) -> f64 {
        let (col, transform) = self.cols[j];
        let raw = match col {
            ResolvedColumn::Intercept => 1.0,
            ResolvedColumn::Treatment => treatment_override.unwrap_or_else(|| ds.treatment(i, t)),
            ResolvedColumn::Confounder(c) => ds.confounder(i, t, c),
            ResolvedColumn::Mediator(c) => ds.mediator(i, t, c),
            ResolvedColumn::PurePredictor(c) => ds.pure_predictor(i, t, c),
        };
        transform.apply(raw)
    }

    /// Fills `row` with the design row at (subject, bin).
    pub fn fill_row(
        &self,
        ds: &PanelDataset,
        i: usize,
        t: usize,
        treatment_override: Option<f64>,
        row: &mut [f64],
    ) {
        for j in 0..self.cols.len() {
            row[j] = self.value(ds, i, t, j, treatment_override);
        }
    }
}

/// Which subject-bins enter a design matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowFilter {
    /// Every subject-bin.
    All,
    /// Bins with at_risk = 1.
    AtRisk,
    /// Bins with observed = 1 (these are at-risk by validity).
    Observed,
    /// Observed bins in one treatment arm.
    ObservedInArm(u8),
}

impl RowFilter {
    #[inline]
    pub fn keeps(self, ds: &PanelDataset, i: usize, t: usize) -> bool {
        match self {
            RowFilter::All => true,
            RowFilter::AtRisk => ds.at_risk(i, t),
            RowFilter::Observed => ds.observed(i, t),
            RowFilter::ObservedInArm(a) => ds.observed(i, t) && ds.treatment(i, t) == a as f64,
        }
    }
}

/// Builds the design matrix over the filtered rows, returning the matrix and
/// the (subject, bin) address of each row.
pub fn build_design(
    ds: &PanelDataset,
    design: &ResolvedDesign,
    filter: RowFilter,
) -> (DMatrix<f64>, Vec<(usize, usize)>) {
    let mut addresses = Vec::new();
    for i in 0..ds.n_subjects() {
        for t in 0..ds.n_bins() {
            if filter.keeps(ds, i, t) {
                addresses.push((i, t));
            }
        }
    }
    let mut x = DMatrix::zeros(addresses.len(), design.n_columns());
    for (r, &(i, t)) in addresses.iter().enumerate() {
        for j in 0..design.n_columns() {
            x[(r, j)] = design.value(ds, i, t, j, None);
        }
    }
    (x, addresses)
}
