//! One ADMM solve at a fixed lambda, with the recovered partition.
//!
//! `cargo run --release --example admm_partition [lambda]`

use qif_fusion::admm::representative_beta;
use qif_fusion::selection::initial_qif_fits;
use qif_fusion::sim::{gen_dataset, SimDesign};
use qif_fusion::{AdmmConfig, AdmmSolver, PairSet, PenaltyConfig, StackedSystem};

const DESIGN: &str = r#"
name = "two-groups"
link = "logit-bernoulli"
m = [6, 6, 6]
n = [300, 300]
partition = [[0, 0, 1], [0, 1, 1]]
theta = [[0.5, 1.0], [-1.0, -0.5]]
lambdas = [0.3]
replicates = 1
seed = 5
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lambda: f64 = std::env::args().nth(1).map_or(Ok(0.3), |s| s.parse())?;
    let design = SimDesign::from_toml(DESIGN)?;
    let system = StackedSystem::new(gen_dataset(&design, 0)?)?;
    let pairs = PairSet::new(system.dataset().n_outcomes(), system.dataset().n_studies());
    let init = initial_qif_fits(&system)?;

    let config = AdmmConfig {
        rho: 2.0,
        trace: true,
        ..AdmmConfig::default()
    };
    let mut solver = AdmmSolver::new(&system, &pairs, PenaltyConfig::new(lambda, 3.0, 2.0)?, config, &init)?;
    loop {
        let report = solver.step()?;
        if report.iteration % 10 == 0 || report.converged {
            println!(
                "iter {:4}  objective {:.6}  primal {:.2e}  dual {:.2e}",
                report.iteration, report.objective, report.primal_residual, report.dual_residual
            );
        }
        if report.converged || report.iteration >= config.max_iter {
            break;
        }
    }
    let state = solver.into_state();
    let partition = qif_fusion::extract_partition(&state, &pairs, config.fuse_epsilon);
    println!("partition {}  (truth {})", partition.signature(), design.true_partition().signature());
    for (g, b) in representative_beta(&state, &partition, system.q()).iter().enumerate() {
        println!("group {}: {:?}", g + 1, b);
    }
    Ok(())
}
