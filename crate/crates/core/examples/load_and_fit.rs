//! Writes a simulated long-format file, then runs the `fit` command on it
//! and checks the artifacts.
//!
//! `cargo run --release --example load_and_fit [data.csv]`

use std::path::PathBuf;

use qif_fusion::io::{cmd_fit, export_replicate, load_artifact, verify_artifacts, RunConfig};
use qif_fusion::sim::SimDesign;
use qif_fusion::LinkFamily;

const DESIGN: &str = r#"
name = "logistic-small"
link = "logit-bernoulli"
m = [6, 6, 6]
n = [300, 300]
partition = [[0, 0, 1], [0, 1, 1]]
theta = [[0.5, 1.0], [-1.0, -0.5]]
lambdas = [0.1]
replicates = 1
seed = 8
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let data: PathBuf = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let p = dir.path().join("data.csv");
            export_replicate(&SimDesign::from_toml(DESIGN)?, 0, &p)?;
            p
        }
    };
    let mut config = RunConfig::new(LinkFamily::LogitBernoulli, (1..=10).map(|i| 0.1 * i as f64).collect());
    config.admm.rho = 2.0;
    config.output_dir = dir.path().join("out");

    let manifest = cmd_fit(&data, &config)?;
    println!("manifest digest {}", manifest.digest);
    verify_artifacts(&config.output_dir)?;
    for a in &manifest.artifacts {
        println!("{}  {}", a.sha256, a.name);
    }
    print!("{}", load_artifact(&config.output_dir, "partition.csv")?);
    print!("{}", load_artifact(&config.output_dir, "estimates.csv")?);
    Ok(())
}
