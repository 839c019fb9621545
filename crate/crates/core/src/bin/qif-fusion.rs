use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qif_fusion::io::{self, RunConfig};
use qif_fusion::{BasisKind, FusionError, LinkFamily, Result, SimDesign};

/// Fusion learning of multi-source, multi-study QIF models.
///
/// Replicates run on a thread pool sized by QIF_FUSION_THREADS.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Path, BIC selection, meta-estimate and heterogeneous comparison.
    Fit(FitArgs),
    /// Solution path only.
    Path(FitArgs),
    /// GMM with a known partition.
    Oracle {
        #[command(flatten)]
        fit: FitArgs,
        /// study,source,group table.
        #[arg(long)]
        partition: PathBuf,
    },
    /// Unpenalized GMM, one group per source.
    Het(FitArgs),
    /// Simulation study from a design file.
    Simulate(SimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Identity,
    Logit,
    Log,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    Independence,
    Exchangeable,
    ArBand,
}

#[derive(Args)]
struct FitArgs {
    /// Long-format CSV.
    #[arg(long)]
    data: PathBuf,
    /// TOML run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    link: Option<LinkArg>,
    #[arg(long, value_enum)]
    basis: Option<BasisArg>,
    /// Band order for `--basis ar-band`.
    #[arg(long, default_value_t = 1)]
    ar_order: usize,
    /// Comma-separated ascending grid.
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    ci_level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    exclude_homogeneous: bool,
}

#[derive(Args)]
struct SimArgs {
    /// TOML simulation design.
    #[arg(long)]
    design: PathBuf,
    #[arg(long, default_value = "qif-fusion-sim")]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 3 when the design's gate thresholds fail.
    #[arg(long)]
    gate: bool,
}

impl FitArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str::<RunConfig>(&text)?
            }
            None => {
                let link = self.link.ok_or_else(|| {
                    FusionError::Config("--link is required without --config".into())
                })?;
                let lambdas = self.lambdas.clone().ok_or_else(|| {
                    FusionError::Config("--lambdas is required without --config".into())
                })?;
                RunConfig::new(link_family(link), lambdas)
            }
        };
        if let Some(l) = self.link {
            cfg.link = link_family(l);
        }
        if let Some(b) = self.basis {
            cfg.basis = match b {
                BasisArg::Independence => BasisKind::Independence,
                BasisArg::Exchangeable => BasisKind::Exchangeable,
                BasisArg::ArBand => BasisKind::ArBand(self.ar_order),
            };
        }
        if let Some(l) = &self.lambdas {
            cfg.lambdas = l.clone();
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(r) = self.rho {
            cfg.admm.rho = r;
        }
        if let Some(t) = self.tol {
            cfg.admm.tol_primal = t;
            cfg.admm.tol_dual = t;
        }
        if let Some(m) = self.max_iter {
            cfg.admm.max_iter = m;
        }
        if let Some(c) = self.ci_level {
            cfg.ci_level = c;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.exclude_homogeneous {
            cfg.exclude_homogeneous = true;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn link_family(l: LinkArg) -> LinkFamily {
    match l {
        LinkArg::Identity => LinkFamily::IdentityGaussian,
        LinkArg::Logit => LinkFamily::LogitBernoulli,
        LinkArg::Log => LinkFamily::LogPoisson,
    }
}

fn run(cli: Cli) -> Result<u8> {
    let manifest = match cli.command {
        Command::Fit(a) => io::cmd_fit(&a.data, &a.config()?)?,
        Command::Path(a) => io::cmd_path(&a.data, &a.config()?)?,
        Command::Het(a) => io::cmd_het(&a.data, &a.config()?)?,
        Command::Oracle { fit, partition } => io::cmd_oracle(&fit.data, &partition, &fit.config()?)?,
        Command::Simulate(a) => {
            let text = std::fs::read_to_string(&a.design)?;
            let mut design = SimDesign::from_toml(&text)?;
            if let Some(r) = a.replicates {
                design.replicates = r;
            }
            if let Some(s) = a.seed {
                design.seed = s;
            }
            design.validate()?;
            let inputs = vec![io::FileDigest {
                name: a.design.file_name().map_or_else(
                    || a.design.display().to_string(),
                    |n| n.to_string_lossy().into_owned(),
                ),
                sha256: io::sha256_hex(text.as_bytes()),
            }];
            let outcome = io::simulate_design(&design, &a.out, inputs)?;
            println!("{}", outcome.manifest.digest);
            for f in &outcome.gate_failures {
                eprintln!("gate: {f}");
            }
            return Ok(if a.gate && !outcome.gate_failures.is_empty() { 3 } else { 0 });
        }
    };
    println!("{}", manifest.digest);
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
