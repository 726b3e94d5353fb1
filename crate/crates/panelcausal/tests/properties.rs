//! Property-based invariants: structural facts that must hold on every panel,
//! not just curated examples — closed forms agree with root-solvers, weighted
//! estimators collapse to OLS in degenerate designs, estimating equations are
//! solved to tolerance, exports round-trip losslessly, and estimation is
//! invariant to subject order.

mod common;

use proptest::prelude::*;
use rand::Rng;

use panelcausal::estimators::{
    bisect_root, compute_weights, estimate_aaiiw, estimate_fiptm, estimate_iiv, estimate_ipt,
    estimate_ols, martingale_residuals, weighted_mean_ee_value, ClipBounds,
    DenominatorConvention, EstimatorTag,
};
use panelcausal::inference::ci_from_bootstrap;
use panelcausal::nuisance::{
    fit_bernoulli_observation, fit_outcome_mean, fit_proportional_rate, fit_propensity,
    BreslowVariant, ConditioningBlock, MeanPooling, ObservationFit,
};
use panelcausal::panel::{
    load_panel_csv, save_panel_csv, DesignSpec, PanelColumns, PanelDataset, TimeGrid,
};
use panelcausal::report::write_montecarlo_csv;
use panelcausal::rng::{derive_stream, StreamDomain};
use panelcausal::simgen::{MonteCarloReport, ReportRow};

use common::random_panel;

/// A complete panel: everything observed, both arms guaranteed.
fn complete_panel(rng: &mut impl Rng, n_subjects: usize, n_bins: usize) -> PanelDataset {
    let cells = n_subjects * n_bins;
    let grid = TimeGrid::new(0.0, n_bins as f64 * 0.1, 0.1).unwrap();
    let k: Vec<f64> = (0..cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut treatment: Vec<f64> =
        (0..cells).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    treatment[0] = 0.0;
    treatment[1] = 1.0;
    let outcome: Vec<f64> =
        (0..cells).map(|c| 0.3 * k[c] + treatment[c] + rng.gen_range(-0.2..0.2)).collect();
    PanelDataset::from_columns(PanelColumns {
        grid,
        subject_ids: (0..n_subjects).map(|i| format!("s{i}")).collect(),
        k_names: vec!["K1".into()],
        m_names: vec![],
        p_names: vec![],
        treatment,
        at_risk: vec![1; cells],
        observed: vec![1; cells],
        outcome,
        k,
        m: Vec::new(),
        p: Vec::new(),
    })
    .unwrap()
}

/// Weight set from the simplest always-fittable designs (intercept-only
/// propensity, intercept-only Bernoulli observation).
fn simple_weights(ds: &PanelDataset) -> panelcausal::estimators::WeightSet {
    let prop = fit_propensity(ds, &DesignSpec::from_names(&["intercept"])).unwrap();
    let obs = fit_bernoulli_observation(ds, &DesignSpec::from_names(&["intercept"])).unwrap();
    compute_weights(ds, &prop, &ObservationFit::Bernoulli(obs), false, ClipBounds::default())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    /// The doubly weighted closed form solves its own estimating equation:
    /// a bracketing root-solver lands on the same ζ to 1e-10, and the
    /// equation value brackets zero around it.
    #[test]
    fn closed_form_equals_root_solve(seed in any::<u64>(), n in 6usize..16, t in 2usize..5) {
        let mut rng = derive_stream(seed, StreamDomain::Auxiliary, &[101]);
        let ds = random_panel(&mut rng, n, t, false);
        let w = simple_weights(&ds);
        let est = estimate_fiptm(&ds, &w).unwrap();
        for arm in [0u8, 1u8] {
            let zeta = est.params.arm_mean(arm);
            let f = |z: f64| weighted_mean_ee_value(&ds, &w, arm, true, true, DenominatorConvention::PerArm, z);
            prop_assert!(f(zeta - 1.0) > 0.0 && f(zeta + 1.0) < 0.0, "EE not decreasing through root");
            let root = bisect_root(f, zeta - 1.0, zeta + 1.0, 1e-13).expect("bracketed");
            prop_assert!((root - zeta).abs() <= 1e-10);
        }
    }

    /// Complete observation collapses the hierarchy: the rate model fits
    /// γ̂ = 0 with unit baseline, so IIV and FIPTM equal their unweighted
    /// counterparts, and with a constant propensity IPT equals OLS.
    #[test]
    fn complete_data_collapses_weighted_estimators_to_ols(seed in any::<u64>(), n in 5usize..12, t in 2usize..4) {
        let mut rng = derive_stream(seed, StreamDomain::Auxiliary, &[102]);
        let ds = complete_panel(&mut rng, n, t);
        let prop = fit_propensity(&ds, &DesignSpec::from_names(&["intercept"])).unwrap();
        let rate = fit_proportional_rate(&ds, &DesignSpec::from_names(&["K1"]), BreslowVariant::AsWritten).unwrap();
        prop_assert!(rate.gamma.amax() <= 1e-6, "complete data must fit a flat rate model");
        let w = compute_weights(&ds, &prop, &ObservationFit::Rate(rate), false, ClipBounds::default()).unwrap();
        let ols = estimate_ols(&ds).unwrap();
        for est in [estimate_ipt(&ds, &w).unwrap(), estimate_iiv(&ds, &w).unwrap(), estimate_fiptm(&ds, &w).unwrap()] {
            prop_assert!((est.params.beta0 - ols.params.beta0).abs() <= 1e-6, "{}: beta0 {} vs OLS {}", est.estimator_tag, est.params.beta0, ols.params.beta0);
            prop_assert!((est.params.beta1 - ols.params.beta1).abs() <= 1e-6, "{}: beta1 {} vs OLS {}", est.estimator_tag, est.params.beta1, ols.params.beta1);
        }
    }

    /// Every estimator reports estimating-equation residuals solved to
    /// 1e-8 · (number of cells).
    #[test]
    fn estimating_equations_are_solved(seed in any::<u64>(), n in 6usize..16, t in 2usize..5) {
        let mut rng = derive_stream(seed, StreamDomain::Auxiliary, &[103]);
        let ds = random_panel(&mut rng, n, t, false);
        let w = simple_weights(&ds);
        let obs = fit_bernoulli_observation(&ds, &DesignSpec::from_names(&["intercept"])).unwrap();
        let obs = ObservationFit::Bernoulli(obs);
        let mu_design = DesignSpec::from_names(&["intercept", "treatment"]);
        let fit_mu = |block| -> [panelcausal::nuisance::OutcomeMeanFit; 2] {
            [0u8, 1u8].map(|arm| {
                fit_outcome_mean(&ds, arm, block, &mu_design, MeanPooling::PooledWithTreatment, None).unwrap()
            })
        };
        let mu_k = fit_mu(ConditioningBlock::KConditional);
        let mu_v = fit_mu(ConditioningBlock::VConditional);
        let tol = 1e-8 * ds.n_cells() as f64;
        let results = [
            estimate_ols(&ds).unwrap(),
            estimate_ipt(&ds, &w).unwrap(),
            estimate_iiv(&ds, &w).unwrap(),
            estimate_fiptm(&ds, &w).unwrap(),
            estimate_aaiiw(&ds, &w, [&mu_k[0], &mu_k[1]], [&mu_v[0], &mu_v[1]], &obs).unwrap(),
        ];
        for est in results {
            for r in &est.ee_residual {
                prop_assert!(r.abs() <= tol, "{}: residual {r}", est.estimator_tag);
            }
        }
    }

    /// Relabeling subjects (any permutation) changes nothing: every estimate
    /// is identical to 1e-12.
    #[test]
    fn estimates_are_invariant_to_subject_order(seed in any::<u64>(), n in 6usize..14, t in 2usize..5) {
        let mut rng = derive_stream(seed, StreamDomain::Auxiliary, &[104]);
        let ds = random_panel(&mut rng, n, t, false);
        // Fisher–Yates permutation of subject indices.
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let shuffled = ds.resample_subjects(&perm);
        let a = estimate_ols(&ds).unwrap();
        let b = estimate_ols(&shuffled).unwrap();
        prop_assert!((a.params.beta1 - b.params.beta1).abs() <= 1e-12);
        let wa = simple_weights(&ds);
        let wb = simple_weights(&shuffled);
        let fa = estimate_fiptm(&ds, &wa).unwrap();
        let fb = estimate_fiptm(&shuffled, &wb).unwrap();
        prop_assert!((fa.params.beta1 - fb.params.beta1).abs() <= 1e-12);
    }

    /// Duplicating every subject rescales all weighted sums by the same
    /// factor, so the self-normalized estimators are unchanged — the
    /// mass-rescaling invariance of Hájek ratios, and a guard on denominator
    /// conventions.
    #[test]
    fn estimates_are_invariant_to_subject_duplication(seed in any::<u64>(), n in 6usize..14, t in 2usize..5) {
        let mut rng = derive_stream(seed, StreamDomain::Auxiliary, &[107]);
        let ds = random_panel(&mut rng, n, t, false);
        let doubled_idx: Vec<usize> = (0..n).chain(0..n).collect();
        let doubled = ds.resample_subjects(&doubled_idx);
        let w = simple_weights(&ds);
        let w2 = simple_weights(&doubled);
        for (est, est2) in [
            (estimate_ols(&ds).unwrap(), estimate_ols(&doubled).unwrap()),
            (estimate_ipt(&ds, &w).unwrap(), estimate_ipt(&doubled, &w2).unwrap()),
            (estimate_iiv(&ds, &w).unwrap(), estimate_iiv(&doubled, &w2).unwrap()),
            (estimate_fiptm(&ds, &w).unwrap(), estimate_fiptm(&doubled, &w2).unwrap()),
        ] {
            prop_assert!((est.params.beta0 - est2.params.beta0).abs() <= 1e-10, "{}", est.estimator_tag);
            prop_assert!((est.params.beta1 - est2.params.beta1).abs() <= 1e-10, "{}", est.estimator_tag);
        }
    }

    /// Martingale residuals of a risk-set-denominator rate fit sum to ~0:
    /// the Breslow baseline matches modeled and observed event counts per bin.
    #[test]
    fn risk_set_baseline_zeroes_martingale_residuals(seed in any::<u64>(), n in 8usize..16, t in 2usize..5) {
        let mut rng = derive_stream(seed, StreamDomain::Auxiliary, &[105]);
        let ds = random_panel(&mut rng, n, t, false);
        let rate = fit_proportional_rate(&ds, &DesignSpec::from_names(&["K1"]), BreslowVariant::RiskSet).unwrap();
        let total: f64 = martingale_residuals(&ds, &ObservationFit::Rate(rate)).iter().sum();
        prop_assert!(total.abs() <= 1e-8 * ds.n_cells() as f64, "residual sum {total}");
    }

    /// Panel CSV export is lossless: save → load reproduces the dataset
    /// exactly, including missing outcomes and censoring patterns.
    #[test]
    fn panel_csv_round_trips(seed in any::<u64>(), n in 3usize..10, t in 2usize..5) {
        let mut rng = derive_stream(seed, StreamDomain::Auxiliary, &[106]);
        let ds = random_panel(&mut rng, n, t, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        save_panel_csv(&ds, &path).unwrap();
        let schema = panelcausal::panel::CsvSchema {
            grid: *ds.grid(),
            confounders: vec!["K1".into()],
            mediators: vec!["M".into()],
            pure_predictors: vec![],
        };
        let back = load_panel_csv(&path, &schema).unwrap();
        prop_assert_eq!(ds, back);
    }

    /// The Monte Carlo CSV carries full precision: every float field parses
    /// back to exactly the value that was written.
    #[test]
    fn montecarlo_csv_floats_round_trip(bias in -10.0f64..10.0, mse in 0.0f64..100.0, ev in 0.0f64..5.0) {
        let row = ReportRow {
            mechanism: "bernoulli".into(),
            gamma_set: "2".into(),
            n: 100,
            estimator: EstimatorTag::Aaiiw,
            scenario: "all".into(),
            replicates: 10,
            successes: 10,
            failures: 0,
            true_effect: 1.0,
            bias,
            mse,
            variance: mse - bias * bias,
            mean_events_a0: ev,
            mean_events_a1: ev * 2.0,
        };
        let report = MonteCarloReport { rows: vec![row], raw_estimates: vec![vec![Some(bias)]] };
        let mut bytes = Vec::new();
        write_montecarlo_csv(&report, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        prop_assert_eq!(fields[6].parse::<f64>().unwrap(), bias);
        prop_assert_eq!(fields[7].parse::<f64>().unwrap(), mse);
        prop_assert_eq!(fields[8].parse::<f64>().unwrap(), mse - bias * bias);
        prop_assert_eq!(fields[9].parse::<f64>().unwrap(), ev);
    }

    /// Percentile intervals are ordered and contained in the range of the
    /// bootstrap estimates, at any level.
    #[test]
    fn percentile_ci_is_ordered_and_contained(
        values in prop::collection::vec(-50.0f64..50.0, 100..400),
        level in 0.5f64..0.999,
    ) {
        let raw: Vec<Option<f64>> = values.iter().copied().map(Some).collect();
        let ci = ci_from_bootstrap(&raw, level, 1).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(ci.lower <= ci.upper);
        prop_assert!(ci.lower >= lo && ci.upper <= hi);
    }
}
