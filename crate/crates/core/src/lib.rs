//! Fusion of regression models across correlated outcome sources.
//!
//! Each (study, outcome) pair is a *source* with its own marginal regression
//! fitted by quadratic inference functions. The sources are stacked into one
//! GMM system; a pairwise minimax concave penalty fuses sources with equal
//! coefficients, ADMM solves the penalized problem over a `lambda` path, a
//! GMM-BIC picks the partition, and a meta-estimator combines the sources
//! within each group with valid standard errors.
//!
//! Runnable examples live under `examples/`:
//!
//! - `qif_fit`: one source, QIF estimation
//! - `gamma_prox`: the proximal map of the penalty
//! - `admm_partition`: one ADMM solve and the induced partition
//! - `solution_path`: `lambda` path and BIC selection
//! - `meta_estimate`: integrated estimate and confidence intervals
//! - `simulate_study`: Monte-Carlo replicates and the metrics table
//! - `load_and_fit`: CSV input through the artifact writer
//!
//! Set `QIF_FUSION_THREADS` to bound the replicate worker pool.

pub mod admm;
pub mod dataset;
pub mod error;
pub mod gauss_newton;
pub mod gmm;
pub mod io;
pub mod linalg;
pub mod meta;
pub mod model;
pub mod penalty;
pub mod selection;
pub mod sim;
pub mod union_find;

pub use admm::{admm_solve, extract_partition, AdmmConfig, AdmmSolver, SolverState};
pub use dataset::StudyDataset;
pub use error::{FusionError, Result};
pub use gmm::{gmm_estimate, PartitionMap, StackedSystem};
pub use meta::{confidence_intervals, meta_combine, MetaEstimate};
pub use model::{qif_fit_source, BasisKind, BasisSet, LinkFamily, SourceBlock};
pub use penalty::{gamma_prox, mcp, PairSet, PenaltyConfig};
pub use selection::{run_path, SolutionPath};
pub use sim::{run_study, SimDesign};
