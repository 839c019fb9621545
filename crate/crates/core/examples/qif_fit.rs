//! Per-source QIF fit on one simulated Poisson source.
//!
//! `cargo run --release --example qif_fit`

use qif_fusion::sim::{gen_dataset, SimDesign};
use qif_fusion::{qif_fit_source, BasisKind, BasisSet};

const DESIGN: &str = r#"
name = "one-source"
link = "log-poisson"
m = [8]
n = [500]
partition = [[0]]
theta = [[0.2, -0.4, 0.3]]
lambdas = [0.1]
replicates = 1
seed = 11
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let design = SimDesign::from_toml(DESIGN)?;
    let data = gen_dataset(&design, 0)?;
    let block = data.block(0, 0);

    let basis = BasisSet::new(BasisKind::ArBand(1), block.m())?;
    println!("basis {:?} with {} matrices", basis.kind(), basis.len());

    let fit = qif_fit_source(block, &vec![0.0; block.q()])?;
    println!(
        "converged in {} iterations, Q = {:.6}, |grad| = {:.2e}",
        fit.iterations, fit.objective, fit.grad_norm
    );
    for (r, (b, t)) in fit.beta.iter().zip(&design.theta[0]).enumerate() {
        println!("beta[{r}] = {b:+.4}  (true {t:+.4})");
    }
    let sens = block.sensitivity(&fit.beta)?;
    println!("sensitivity is {} x {}", sens.nrows(), sens.ncols());
    Ok(())
}
