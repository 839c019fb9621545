//! Meta-estimate of group parameters next to the heterogeneous fit.
//!
//! `cargo run --release --example meta_estimate`

use qif_fusion::selection::initial_qif_fits;
use qif_fusion::sim::{gen_dataset, SimDesign};
use qif_fusion::{
    confidence_intervals, gmm_estimate, meta_combine, run_path, AdmmConfig, PairSet,
    PartitionMap, PenaltyConfig, StackedSystem,
};

const DESIGN: &str = r#"
name = "poisson-homogeneous"
link = "log-poisson"
m = [8, 8, 8, 8]
n = [600]
partition = [[0, 0, 0, 0]]
theta = [[0.1, -0.3]]
lambdas = [0.1]
replicates = 1
seed = 21
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let design = SimDesign::from_toml(DESIGN)?;
    let system = StackedSystem::new(gen_dataset(&design, 0)?)?;
    let pairs = PairSet::new(system.dataset().n_outcomes(), 1);
    let lambdas: Vec<f64> = (1..=10).map(|i| 0.03 * i as f64).collect();
    let admm = AdmmConfig {
        rho: 2.0,
        ..AdmmConfig::default()
    };
    let path = run_path(&system, &pairs, &lambdas, PenaltyConfig::new(0.0, 3.0, 2.0)?, admm, false)?;
    let rec = path.selected_record();
    let est = meta_combine(&system, &rec.partition, &rec.beta_hat)?;
    let ci = confidence_intervals(&est, 0.95)?;
    let se = est.standard_errors();
    println!("partition {}", rec.partition.signature());
    for (r, t) in est.theta.iter().enumerate() {
        println!(
            "theta[{r}] = {t:+.4}  se {:.4}  95% CI [{:+.4}, {:+.4}]",
            se[r], ci[r].0, ci[r].1
        );
    }

    let init = initial_qif_fits(&system)?;
    let het = gmm_estimate(&system, &PartitionMap::singletons(system.n_sources()), &init)?;
    let het_se = het.standard_errors();
    let q = system.q();
    for s in 0..system.n_sources() {
        println!(
            "source {}: beta {:?}  se {:?}",
            s + 1,
            &het.theta[s * q..(s + 1) * q],
            &het_se[s * q..(s + 1) * q]
        );
    }
    Ok(())
}
