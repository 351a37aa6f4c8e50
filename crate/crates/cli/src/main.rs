use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use tofrecon_cli::commands;
use tofrecon_cli::config::PipelineConfig;
use tofrecon_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "tofrecon",
    version,
    about = "Isotopic density reconstruction from neutron time-of-flight counts"
)]
struct Cli {
    /// Worker threads; defaults to the available hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured open-beam weight `solver.beta`.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates sample and open-beam stacks of the configured disk phantom.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Estimates flux, background and scaling from region averages.
    FitNuisance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ys: PathBuf,
        #[arg(long)]
        yo: PathBuf,
    },
    /// Reconstructs per-pixel areal densities given a nuisance estimate.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ys: PathBuf,
        #[arg(long)]
        yo: PathBuf,
        #[arg(long)]
        nuisance: PathBuf,
        /// Re-estimate the dose factor from this stack's open-beam region.
        #[arg(long)]
        per_view_dose: bool,
    },
    /// Reconstructs volumetric densities from per-view reconstructions.
    Tomo {
        #[command(flatten)]
        common: Common,
        /// JSON list of `{ "manifest": ..., "angle_deg": ... }` entries.
        #[arg(long)]
        views: PathBuf,
    },
    /// Per-region mean ± std table and normalized preview images.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        z: PathBuf,
        /// Ground-truth densities used for the truth column and the normalization.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Writes the built-in cross-section tables as CSV.
    MakeLibrary {
        /// Restrict to the configured isotopes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load(common: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(beta) = common.beta {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(CliError::config("--beta", format!("must be non-negative, got {beta}")));
        }
        cfg.solver.beta = beta;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config("--threads", e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { common } => {
            let cfg = load(&common)?;
            commands::simulate(&cfg, &common.out_dir)?;
        }
        Command::FitNuisance { common, ys, yo } => {
            let cfg = load(&common)?;
            commands::fit_nuisance(&cfg, &ys, &yo, &common.out_dir)?;
        }
        Command::Reconstruct {
            common,
            ys,
            yo,
            nuisance,
            per_view_dose,
        } => {
            let cfg = load(&common)?;
            commands::reconstruct(&cfg, &ys, &yo, &nuisance, per_view_dose, &common.out_dir)?;
        }
        Command::Tomo { common, views } => {
            let cfg = load(&common)?;
            commands::tomo(&cfg, &views, &common.out_dir)?;
        }
        Command::Report { common, z, truth } => {
            let cfg = load(&common)?;
            for row in commands::report(&cfg, &z, truth.as_deref(), &common.out_dir)? {
                println!("{:10} {:8} {}", row.region, row.isotope, row.mean_pm_std);
            }
        }
        Command::MakeLibrary { config, out_dir } => {
            let labels = match config {
                Some(p) => Some(PipelineConfig::load(&p)?.isotopes.labels),
                None => None,
            };
            for p in commands::make_library(labels.as_deref(), &out_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
