//! Warm-started lambda path with BIC selection.
//!
//! `cargo run --release --example solution_path`

use qif_fusion::selection::write_path_table;
use qif_fusion::sim::{gen_dataset, SimDesign};
use qif_fusion::{run_path, AdmmConfig, PairSet, PenaltyConfig, StackedSystem};

const DESIGN: &str = r#"
name = "poisson-two-groups"
link = "log-poisson"
m = [6, 6, 6]
n = [400, 400]
partition = [[0, 0, 1], [0, 0, 1]]
theta = [[-0.4, 0.1], [0.3, -0.5]]
lambdas = [0.1]
replicates = 1
seed = 3
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let design = SimDesign::from_toml(DESIGN)?;
    let system = StackedSystem::new(gen_dataset(&design, 0)?)?;
    let pairs = PairSet::new(system.dataset().n_outcomes(), system.dataset().n_studies());
    let lambdas: Vec<f64> = (1..=12).map(|i| 0.04 * i as f64).collect();
    let admm = AdmmConfig {
        rho: 2.0,
        ..AdmmConfig::default()
    };
    let path = run_path(&system, &pairs, &lambdas, PenaltyConfig::new(0.0, 3.0, 2.0)?, admm, false)?;
    write_path_table(&path, std::io::stdout())?;
    let rec = path.selected_record();
    println!(
        "selected lambda {} with {} groups: {}",
        rec.lambda,
        rec.n_groups,
        rec.partition.signature()
    );
    if let Some(w) = &path.warning {
        println!("warning: {w}");
    }
    Ok(())
}
