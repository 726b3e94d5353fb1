//! Shared helpers for the integration test suites: random panel generation
//! and finite-difference utilities. Everything here is deterministic given
//! the caller's RNG.

#![allow(dead_code)]

use rand::Rng;

use panelcausal::panel::{PanelColumns, PanelDataset, TimeGrid};

/// A random small panel: time-varying confounder `K1`, optional mediator `M`,
/// random treatment, everything at risk, Bernoulli observation times.
///
/// Guarantees at least two observed outcomes per arm and at least one
/// unobserved bin, so every fitting routine has the support it needs.
pub fn random_panel(
    rng: &mut impl Rng,
    n_subjects: usize,
    n_bins: usize,
    with_mediator: bool,
) -> PanelDataset {
    let cells = n_subjects * n_bins;
    let grid = TimeGrid::new(0.0, n_bins as f64 * 0.1, 0.1).unwrap();
    let k: Vec<f64> = (0..cells).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let m: Vec<f64> = if with_mediator {
        (0..cells).map(|_| rng.gen_range(0.0..4.0)).collect()
    } else {
        Vec::new()
    };
    let treatment: Vec<f64> = (0..cells)
        .map(|c| {
            let p = 1.0 / (1.0 + (-0.4 * k[c]).exp());
            if rng.gen_bool(p) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut observed: Vec<u8> = (0..cells).map(|_| u8::from(rng.gen_bool(0.45))).collect();
    // Force at least two observed cells per arm (closed forms need per-arm
    // support) and at least one unobserved cell (Bernoulli fits need both
    // classes).
    for arm in [0.0, 1.0] {
        let in_arm: Vec<usize> = (0..cells).filter(|&c| treatment[c] == arm).collect();
        let seen = in_arm.iter().filter(|&&c| observed[c] == 1).count();
        for &c in in_arm.iter().take(2usize.saturating_sub(seen)) {
            observed[c] = 1;
        }
    }
    if observed.iter().all(|&d| d == 1) {
        observed[cells - 1] = 0;
    }
    let outcome: Vec<f64> = (0..cells)
        .map(|c| {
            if observed[c] == 1 {
                0.2 + treatment[c] + 0.5 * k[c] + rng.gen_range(-0.3..0.3)
            } else {
                f64::NAN
            }
        })
        .collect();
    PanelDataset::from_columns(PanelColumns {
        grid,
        subject_ids: (0..n_subjects).map(|i| format!("s{i}")).collect(),
        k_names: vec!["K1".into()],
        m_names: if with_mediator { vec!["M".into()] } else { Vec::new() },
        p_names: Vec::new(),
        treatment,
        at_risk: vec![1; cells],
        observed,
        outcome,
        k,
        m,
        p: Vec::new(),
    })
    .unwrap()
}

/// Central finite difference of `f` at `x` in coordinate `j` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], j: usize, h: f64) -> f64 {
    let mut hi = x.to_vec();
    let mut lo = x.to_vec();
    hi[j] += h;
    lo[j] -= h;
    (f(&hi) - f(&lo)) / (2.0 * h)
}
