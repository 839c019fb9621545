//! Runs a small Monte-Carlo study and prints the metrics table.
//!
//! `cargo run --release --example simulate_study [design.toml]`

use std::time::Instant;

use qif_fusion::sim::{run_study, write_metrics, SimDesign};

const DEFAULT_DESIGN: &str = r#"
name = "poisson-homogeneous"
link = "log-poisson"
m = [12, 12, 12, 12, 12, 12]
n = [800]
partition = [[0, 0, 0, 0, 0, 0]]
theta = [[0.1, -0.3, -0.6]]
lambdas = [0.01, 0.02, 0.04, 0.08, 0.16, 0.32]
replicates = 4
seed = 7
compare_heterogeneous = true
compare_oracle = true
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path)?,
        None => DEFAULT_DESIGN.to_string(),
    };
    let design = SimDesign::from_toml(&text)?;
    let start = Instant::now();
    let outcome = run_study(&design)?;
    eprintln!(
        "{} replicates in {:.2?}",
        design.replicates,
        start.elapsed()
    );
    for r in &outcome.replicates {
        if let Some(e) = &r.error {
            eprintln!("replicate {} failed: {e}", r.replicate);
            continue;
        }
        eprintln!(
            "replicate {}: lambda {} groups {} partition {}",
            r.replicate, r.lambda, r.n_groups, r.partition
        );
    }
    let m = &outcome.metrics;
    println!("recovery rate {:.3}, mean groups {:.2}", m.recovery_rate, m.mean_groups);
    if let Some(ratio) = &m.rmse_ratio {
        println!("heterogeneous / fused RMSE: {ratio:?}");
    }
    write_metrics(m, std::io::stdout())?;
    Ok(())
}
