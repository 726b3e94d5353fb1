//! Weighted and augmented estimators for the marginal effect of a binary
//! time-varying treatment on an irregularly observed longitudinal outcome.
//!
//! The crate has three layers:
//!
//! * **Data + nuisances** — [`panel`] defines the long-format panel and design
//!   formulas; [`nuisance`] fits the working models (logistic propensity,
//!   proportional observation rates with a Breslow-type baseline, Bernoulli
//!   observation models, weighted outcome-mean regressions).
//! * **Estimators + inference** — [`estimators`] turns fitted nuisances into
//!   inverse-weighted and augmented effect estimates; [`inference`] adds
//!   asymptotic variances, a subject-level bootstrap, and balance diagnostics.
//! * **Experiments** — [`simgen`] generates synthetic cohorts and runs the
//!   Monte Carlo comparison grid; [`report`] renders results; [`config`]
//!   drives everything from a JSON experiment description (the thin CLI binary
//!   is a wrapper around [`config::run`]).
//!
//! Start with the `examples/` directory: each file is a runnable walkthrough
//! of one capability.

pub mod config;
pub mod estimators;
pub mod inference;
pub mod nuisance;
pub mod panel;
pub mod report;
pub mod rng;
pub mod simgen;
pub mod sums;
