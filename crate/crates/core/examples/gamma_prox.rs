//! The pairwise MCP proximal map in its three regimes.
//!
//! `cargo run --release --example gamma_prox`

use qif_fusion::penalty::prox_objective;
use qif_fusion::{gamma_prox, mcp, PenaltyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PenaltyConfig::new(0.5, 3.0, 1.0)?;
    println!("MCP knot at {}, plateau {}", cfg.delta * cfg.lambda, mcp(10.0, &cfg));

    let cases: [&[f64]; 4] = [
        &[0.1, -0.2, 0.05],
        &[0.6, -0.3, 0.2],
        &[2.0, -1.5, 0.4],
        &[0.0, 0.0, 0.0],
    ];
    for zeta in cases {
        let gamma = gamma_prox(zeta, &cfg)?;
        println!(
            "zeta {:?} -> gamma {:?}  objective {:.6} (at zeta {:.6})",
            zeta,
            gamma.iter().map(|g| (g * 1e6).round() / 1e6).collect::<Vec<_>>(),
            prox_objective(&gamma, zeta, &cfg),
            prox_objective(zeta, zeta, &cfg),
        );
    }
    Ok(())
}
