//! End-to-end tests of the command-line binary: both modes produce their
//! complete output sets with the pinned schemas, runs are deterministic and
//! idempotent, and config errors exit with code 1 and a diagnostic that names
//! the offending fields.

use std::path::Path;
use std::process::{Command, Output};

use panelcausal::config::{config_from_summary, CONFIG_EMBED_MARKER};
use panelcausal::panel::save_panel_csv;
use panelcausal::report::MONTECARLO_CSV_COLUMNS;
use panelcausal::simgen::{simulate_cohort, DGPConfig};

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panelcausal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_json(path: &Path, value: &serde_json::Value) {
    std::fs::write(path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
}

fn simulate_config(out_dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "mode": "simulate",
        "output_dir": out_dir,
        "base_seed": 20260816u64,
        "simulate": {
            "dgp": [serde_json::to_value(DGPConfig::bernoulli(250, 1, true).unwrap()).unwrap()],
            "scenarios": ["all"],
            "estimators": ["OLS", "IPT", "IIV", "FIPTM", "AAIIW"],
            "replicates": 10
        }
    })
}

#[test]
fn simulate_mode_writes_complete_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    let out_dir = dir.path().join("out");
    write_json(&config_path, &simulate_config(&out_dir));

    let output = run_cli(&["--config", config_path.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );

    let mc = std::fs::read_to_string(out_dir.join("montecarlo.csv")).unwrap();
    let mut lines = mc.lines();
    assert_eq!(lines.next().unwrap(), MONTECARLO_CSV_COLUMNS.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5, "one row per estimator");
    for tag in ["OLS", "IPT", "IIV", "FIPTM", "AAIIW"] {
        assert!(
            rows.iter().any(|r| r.contains(&format!(",{tag},"))),
            "montecarlo.csv row for {tag}"
        );
    }
    for row in &rows {
        assert!(row.starts_with("bernoulli,1,250,"));
        assert!(row.ends_with(",0"), "no failures expected: {row}");
    }

    let reps = std::fs::read_to_string(out_dir.join("replicates.csv")).unwrap();
    assert_eq!(
        reps.lines().count(),
        1 + 5 * 10,
        "header plus one line per estimator × replicate"
    );

    let summary = std::fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("== bernoulli mechanism, coefficient set 1, n=250, R=10 =="));
    assert!(summary.contains(CONFIG_EMBED_MARKER));

    // The embedded config must parse back to the resolved experiment.
    let embedded = config_from_summary(&summary).expect("config parses from summary");
    assert_eq!(embedded.base_seed, 20260816);
    assert_eq!(embedded.output_dir.as_deref(), Some(out_dir.as_path()));
}

#[test]
fn reruns_and_parallelism_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    write_json(&config_path, &simulate_config(&out_a));

    let first = run_cli(&["--config", config_path.to_str().unwrap(), "--jobs", "1"]);
    assert!(first.status.success());
    let bytes_first = std::fs::read(out_a.join("montecarlo.csv")).unwrap();

    // Same config, same out dir: idempotent.
    let second = run_cli(&["--config", config_path.to_str().unwrap(), "--jobs", "1"]);
    assert!(second.status.success());
    assert_eq!(bytes_first, std::fs::read(out_a.join("montecarlo.csv")).unwrap());

    // --out override and a different worker count: still identical bytes.
    let third = run_cli(&[
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--jobs",
        "4",
    ]);
    assert!(third.status.success());
    assert_eq!(bytes_first, std::fs::read(out_b.join("montecarlo.csv")).unwrap());
    assert_eq!(
        std::fs::read(out_a.join("replicates.csv")).unwrap(),
        std::fs::read(out_b.join("replicates.csv")).unwrap()
    );

    // A different seed must actually change the results.
    let out_c = dir.path().join("c");
    let fourth = run_cli(&[
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert!(fourth.status.success());
    assert_ne!(bytes_first, std::fs::read(out_c.join("montecarlo.csv")).unwrap());
}

#[test]
fn config_with_both_mode_blocks_exits_one_naming_both() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    let mut value = simulate_config(&dir.path().join("out"));
    value["estimate"] = serde_json::json!({
        "input": "whatever.csv",
        "schema": {
            "grid": {"start": 0.0, "end": 2.0, "bin_width": 0.1},
            "confounders": ["K1"], "mediators": [], "pure_predictors": []
        },
        "designs": {
            "observation_model": {"model": "bernoulli_logistic"},
            "propensity": {"columns": [{"column": "intercept"}]},
            "intensity": {"columns": [{"column": "intercept"}]},
            "mu_k": {"columns": [{"column": "intercept"}]},
            "mu_v": {"columns": [{"column": "intercept"}]}
        },
        "estimators": ["OLS"]
    });
    write_json(&config_path, &value);

    let output = run_cli(&["--config", config_path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("configuration error"), "stderr: {stderr}");
    assert!(
        stderr.contains("estimate") && stderr.contains("simulate"),
        "diagnostic names both blocks: {stderr}"
    );
}

#[test]
fn unreadable_config_and_missing_input_exit_one() {
    let dir = tempfile::tempdir().unwrap();

    let output = run_cli(&["--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("configuration error"));

    // Estimate config referencing an input CSV that does not exist.
    let config_path = dir.path().join("est.json");
    write_json(
        &config_path,
        &serde_json::json!({
            "mode": "estimate",
            "output_dir": dir.path().join("out"),
            "base_seed": 1u64,
            "estimate": {
                "input": dir.path().join("missing_cohort.csv"),
                "schema": {
                    "grid": {"start": 0.0, "end": 2.0, "bin_width": 0.1},
                    "confounders": ["K1"], "mediators": [], "pure_predictors": []
                },
                "designs": {
                    "observation_model": {"model": "bernoulli_logistic"},
                    "propensity": {"columns": [{"column": "intercept"}]},
                    "intensity": {"columns": [{"column": "intercept"}]},
                    "mu_k": {"columns": [{"column": "intercept"}]},
                    "mu_v": {"columns": [{"column": "intercept"}]}
                },
                "estimators": ["OLS"]
            }
        }),
    );
    let output = run_cli(&["--config", config_path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("missing_cohort.csv"), "stderr: {stderr}");
}

#[test]
fn estimate_mode_is_self_consistent_on_a_simulated_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cohort_path = dir.path().join("cohort.csv");
    let cfg = DGPConfig::bernoulli(600, 2, true).unwrap();
    let ds = simulate_cohort(&cfg, 424242).unwrap();
    save_panel_csv(&ds, &cohort_path).unwrap();

    let out_dir = dir.path().join("out");
    let config_path = dir.path().join("est.json");
    write_json(
        &config_path,
        &serde_json::json!({
            "mode": "estimate",
            "output_dir": out_dir,
            "base_seed": 99u64,
            "estimate": {
                "input": cohort_path,
                "schema": {
                    "grid": {"start": 0.0, "end": 2.0, "bin_width": 0.1},
                    "confounders": ["K1", "K2", "K3"],
                    "mediators": ["M"],
                    "pure_predictors": ["P"]
                },
                "designs": {
                    "observation_model": {"model": "bernoulli_logistic"},
                    "propensity": {"columns": [
                        {"column": "intercept"}, {"column": "K1"}, {"column": "K2"}, {"column": "K3"}
                    ]},
                    "intensity": {"columns": [
                        {"column": "intercept"}, {"column": "treatment"}, {"column": "M"},
                        {"column": "K1"}, {"column": "K2"}, {"column": "K3"}, {"column": "P"}
                    ]},
                    "mu_k": {"columns": [
                        {"column": "intercept"}, {"column": "treatment"},
                        {"column": "K1"}, {"column": "K2"}, {"column": "K3"}, {"column": "P"}
                    ]},
                    "mu_v": {"columns": [
                        {"column": "intercept"}, {"column": "treatment"}, {"column": "M"},
                        {"column": "K1"}, {"column": "K2"}, {"column": "K3"}, {"column": "P"}
                    ]}
                },
                "estimators": ["OLS", "AAIIW"],
                "bootstrap": {"replicates": 200}
            }
        }),
    );

    let output = run_cli(&["--config", config_path.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );

    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("estimates.json")).unwrap())
            .unwrap();
    assert_eq!(doc["n_subjects"], 600);
    let estimates = doc["estimates"].as_array().unwrap();
    assert_eq!(estimates.len(), 2);

    let find = |tag: &str| {
        estimates
            .iter()
            .find(|e| e["estimator"] == tag)
            .unwrap_or_else(|| panic!("estimate record for {tag}"))
    };
    let aaiiw = find("AAIIW");
    let beta1 = aaiiw["beta1"].as_f64().unwrap();
    let lower = aaiiw["bootstrap_ci"]["lower"].as_f64().unwrap();
    let upper = aaiiw["bootstrap_ci"]["upper"].as_f64().unwrap();
    assert!(
        lower <= beta1 && beta1 <= upper,
        "point estimate {beta1} inside its own interval [{lower}, {upper}]"
    );
    assert!(upper - lower < 0.8, "interval width sane: [{lower}, {upper}]");
    // This generator induces strong upward confounding; the adjusted estimate
    // must land well below the unadjusted one.
    let ols_beta1 = find("OLS")["beta1"].as_f64().unwrap();
    assert!(
        ols_beta1 - beta1 > 0.5,
        "confounding correction visible: OLS {ols_beta1} vs adjusted {beta1}"
    );

    let balance = std::fs::read_to_string(out_dir.join("balance.csv")).unwrap();
    let mut lines = balance.lines();
    assert_eq!(
        lines.next().unwrap(),
        "covariate,stratum,unweighted_mean,unweighted_sd,weighted_mean,weighted_sd,n"
    );
    let body: Vec<&str> = lines.collect();
    assert!(body.iter().any(|l| l.starts_with("K1,treatment=0,")));
    assert!(body.iter().any(|l| l.starts_with("K1,observed=1,")));
}
