//! The two calibration sweeps behind the generator's stored observation
//! constants. Both target published numbers from the reference design's
//! simulation tables; neither value is guessable from the design text alone,
//! so the sweeps are kept here, runnable, as the constants' provenance.
//!
//! `cap` mode sweeps the proportionality constant `c` of the capped Poisson
//! observation mechanism and scores each candidate by least squares against
//! the reference mean-events-per-subject table, `(untreated, treated)` per
//! coefficient set: (12, 12), (22, 17), (3, 8), (2, 5). Event counts scale
//! with the number of bins, so this sweep runs on the fine analysis grid
//! (bin width 0.01) that reproduces the reference tables; see
//! `POISSON_CAP_SCALE_CALIBRATED`.
//!
//! `gamma3` mode sweeps the mediator coefficient of Bernoulli coefficient
//! set 2 and scores candidates against the reference bias anchors for that
//! set (OLS ≈ 1.30, treatment-weighted ≈ 0.93). The printed −1 tilts
//! selection far past those anchors; the sweep recovers the calibrated
//! −0.28 stored in `BERNOULLI_GAMMA_SET2_CALIBRATED`. Bias anchors are
//! insensitive to the grid, so this mode defaults to the coarser default
//! grid for speed.
//!
//! Usage:
//!   cargo run --release --example calibrate_observation -- \
//!       cap    [c_min] [c_max] [c_step] [n] [cohorts] [seed] [bin_width]
//!   cargo run --release --example calibrate_observation -- \
//!       gamma3 [lo] [hi] [step] [n] [replicates] [seed] [bin_width]
//!
//! Defaults:
//!   cap    1.0 8.0 0.5 1000 30 20260816 0.01
//!   gamma3 -1.0 0.0 0.1 1000 60 20260816 0.1
//!
//! The stored constants were fixed with finer invocations of the same sweeps
//! (`cap 2.0 4.0 0.1 1000 100`, then `gamma3 -0.40 -0.20 0.02 1000 200`).

use panelcausal::estimators::EstimatorTag;
use panelcausal::panel::TimeGrid;
use panelcausal::simgen::{
    run_monte_carlo, simulate_cohort, DGPConfig, ObservationMechanism, ScenarioSpec,
};

/// Reference mean observed events per subject, `(untreated, treated)` for
/// Poisson coefficient sets 1..=4 on the fine analysis grid.
const EVENT_TARGETS: [(f64, f64); 4] = [(12.0, 12.0), (22.0, 17.0), (3.0, 8.0), (2.0, 5.0)];

/// Reference bias anchors for Bernoulli coefficient set 2: (OLS,
/// treatment-weighted).
const SET2_BIAS_ANCHORS: (f64, f64) = (1.30, 0.93);

fn parse(args: &[String], i: usize, default: f64) -> f64 {
    args.get(i).map(|s| s.parse().expect("numeric argument")).unwrap_or(default)
}

/// Mean observed events per subject by arm at event time, averaged over
/// `cohorts` simulated cohorts.
fn mean_events(cfg: &DGPConfig, cohorts: usize, seed: u64) -> (f64, f64) {
    let (mut e0, mut e1) = (0.0, 0.0);
    for r in 0..cohorts {
        let ds = simulate_cohort(cfg, seed.wrapping_add(r as u64)).expect("simulation succeeds");
        let (a0, a1) = ds.mean_events_per_arm();
        e0 += a0;
        e1 += a1;
    }
    (e0 / cohorts as f64, e1 / cohorts as f64)
}

fn sweep_cap(args: &[String]) {
    let c_min = parse(args, 2, 1.0);
    let c_max = parse(args, 3, 8.0);
    let c_step = parse(args, 4, 0.5);
    let n = parse(args, 5, 1000.0) as usize;
    let cohorts = parse(args, 6, 30.0) as usize;
    let seed = parse(args, 7, 20260816.0) as u64;
    let bin_width = parse(args, 8, 0.01);
    let grid = TimeGrid::new(0.0, 2.0, bin_width).expect("valid grid");

    println!("capped-Poisson scale sweep: c in [{c_min}, {c_max}] step {c_step}, n={n}, {cohorts} cohorts/cell, bin width {bin_width}");
    println!("targets (untreated, treated) per coefficient set: {EVENT_TARGETS:?}\n");
    println!("{:>6}  {:>14} {:>14} {:>14} {:>14}  {:>10}", "c", "set 1", "set 2", "set 3", "set 4", "loss");

    let mut best: Option<(f64, f64)> = None;
    let mut c = c_min;
    while c <= c_max + 1e-9 {
        let mut loss = 0.0;
        let mut cells = String::new();
        for set in 1..=4usize {
            let mut cfg = DGPConfig::poisson(n, set).expect("stock config");
            cfg.grid = grid.clone();
            cfg.proportionality_constant = c;
            let (e0, e1) = mean_events(&cfg, cohorts, seed ^ (set as u64) << 32);
            let (t0, t1) = EVENT_TARGETS[set - 1];
            loss += (e0 - t0).powi(2) + (e1 - t1).powi(2);
            cells.push_str(&format!(" ({e0:5.2},{e1:5.2})"));
        }
        println!("{c:>6.2} {cells}  {loss:>10.3}");
        if best.map_or(true, |(_, l)| loss < l) {
            best = Some((c, loss));
        }
        c += c_step;
    }

    let (c_star, loss) = best.expect("non-empty sweep");
    println!("\nleast-squares scale: c = {c_star} (loss {loss:.3})");
    println!("per-set fit at c = {c_star}:");
    for set in 1..=4usize {
        let mut cfg = DGPConfig::poisson(n, set).expect("stock config");
        cfg.grid = grid.clone();
        cfg.proportionality_constant = c_star;
        let (e0, e1) = mean_events(&cfg, 2 * cohorts, seed ^ (set as u64) << 40);
        let (t0, t1) = EVENT_TARGETS[set - 1];
        println!(
            "  set {set}: ({e0:5.2}, {e1:5.2})  target ({t0:4.1}, {t1:4.1})  ratio ({:.2}, {:.2})",
            e0 / t0,
            e1 / t1
        );
    }
}

fn sweep_gamma3(args: &[String]) {
    let lo = parse(args, 2, -1.0);
    let hi = parse(args, 3, 0.0);
    let step = parse(args, 4, 0.1);
    let n = parse(args, 5, 1000.0) as usize;
    let replicates = parse(args, 6, 60.0) as usize;
    let seed = parse(args, 7, 20260816.0) as u64;
    let bin_width = parse(args, 8, 0.1);
    let grid = TimeGrid::new(0.0, 2.0, bin_width).expect("valid grid");
    let (t_ols, t_ipt) = SET2_BIAS_ANCHORS;

    println!("Bernoulli set-2 mediator-coefficient sweep: gamma3 in [{lo}, {hi}] step {step}, n={n}, R={replicates}, bin width {bin_width}");
    println!("bias anchors: OLS {t_ols}, treatment-weighted {t_ipt}\n");
    println!("{:>8}  {:>9} {:>9}  {:>9}", "gamma3", "OLS", "IPT", "loss");

    let estimators = [EstimatorTag::Ols, EstimatorTag::Ipt];
    let scenarios = [ScenarioSpec::all_correct()];
    let mut best: Option<(f64, f64)> = None;
    let mut g = lo;
    while g <= hi + 1e-9 {
        let mut cfg = DGPConfig::bernoulli(n, 2, false).expect("stock config");
        cfg.grid = grid.clone();
        if let ObservationMechanism::Bernoulli { gamma } = &mut cfg.observation {
            gamma[2] = g;
        }
        let report = run_monte_carlo(&cfg, &scenarios, &estimators, replicates, seed)
            .expect("Monte Carlo run succeeds");
        let bias = |tag: EstimatorTag| {
            report
                .rows
                .iter()
                .find(|r| r.estimator == tag)
                .expect("estimator row present")
                .bias
        };
        let (b_ols, b_ipt) = (bias(EstimatorTag::Ols), bias(EstimatorTag::Ipt));
        let loss = (b_ols - t_ols).powi(2) + (b_ipt - t_ipt).powi(2);
        println!("{g:>8.2}  {b_ols:>9.4} {b_ipt:>9.4}  {loss:>9.4}");
        if best.map_or(true, |(_, l)| loss < l) {
            best = Some((g, loss));
        }
        g += step;
    }

    let (g_star, loss) = best.expect("non-empty sweep");
    println!("\nleast-squares mediator coefficient: gamma3 = {g_star:.2} (loss {loss:.4})");
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str) {
        Some("cap") => sweep_cap(&args),
        Some("gamma3") => sweep_gamma3(&args),
        _ => {
            eprintln!("usage: calibrate_observation <cap|gamma3> [sweep args...] (see source header)");
            std::process::exit(2);
        }
    }
}
