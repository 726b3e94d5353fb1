//! A small Monte Carlo run: Bernoulli observation mechanism, coefficient
//! set 2 (calibrated), all five robustness scenarios, every estimator.
//!
//! ```text
//! cargo run --release -p panelcausal --example monte_carlo_small
//! ```

use panelcausal::estimators::EstimatorTag;
use panelcausal::simgen::{run_monte_carlo, DGPConfig, ScenarioSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n = 1000;
    let replicates = 50;
    let cfg = DGPConfig::bernoulli(n, 2, true)?;
    let estimators = [
        EstimatorTag::Ols,
        EstimatorTag::Ipt,
        EstimatorTag::Iiv,
        EstimatorTag::Fiptm,
        EstimatorTag::Aaiiw,
    ];
    let start = std::time::Instant::now();
    let report = run_monte_carlo(&cfg, &ScenarioSpec::robustness_rows(), &estimators, replicates, 20260816)?;
    let elapsed = start.elapsed();

    let any = &report.rows[0];
    println!(
        "mechanism={} gamma_set={} n={} R={} ({:.1?})",
        any.mechanism, any.gamma_set, any.n, any.replicates, elapsed
    );
    println!(
        "mean events/subject: untreated {:.2}, treated {:.2}\n",
        any.mean_events_a0, any.mean_events_a1
    );
    println!("{:<10} {:<9} {:>9} {:>9} {:>9} {:>5}", "estimator", "scenario", "bias", "mse", "variance", "fail");
    for cell in &report.rows {
        println!(
            "{:<10} {:<9} {:>+9.4} {:>9.4} {:>9.4} {:>5}",
            cell.estimator.to_string(),
            cell.scenario,
            cell.bias,
            cell.mse,
            cell.variance,
            cell.failures
        );
    }
    Ok(())
}
