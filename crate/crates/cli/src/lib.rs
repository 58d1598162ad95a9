//! Command-line orchestration: configuration, seeded replica scheduling and
//! artifact emission.

// `!(a < b)` is used deliberately so that NaN takes the failing branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Overrides, RunConfig};
pub use error::{CliError, ConfigError};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "CRITREC_OUT";

#[derive(Debug, Parser)]
#[command(name = "critrec", version, about = "Simulation and estimation of invariant measures of critical stochastic recursions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `run.replicas`.
    #[arg(long, global = true)]
    pub replicas: Option<u32>,
    /// Output directory; defaults to `output_dir`, then `$CRITREC_OUT/<config name>`, then `runs/<config name>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the model assumptions in closed form.
    Validate,
    /// Simulate and write the normalized occupation histograms.
    Simulate,
    /// Tail profiles and plateau fits.
    Tail,
    /// psi, its moments and the tail constants.
    Constants,
    /// Residual of the Poisson equation on the grid.
    PoissonCheck,
    /// Contractive-regime tail index against its closed form.
    KestenBaseline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Tail => "tail",
            Command::Constants => "constants",
            Command::PoissonCheck => "poisson-check",
            Command::KestenBaseline => "kesten-baseline",
        }
    }
}

/// Resolves the output directory from the flag, the config, the environment
/// and the config file name, in that order.
pub fn output_dir(args: &CommonArgs, cfg: &RunConfig, config_path: &Path, env_root: Option<PathBuf>) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    if let Some(o) = &cfg.output_dir {
        return o.clone();
    }
    let stem = config_path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    env_root.unwrap_or_else(|| PathBuf::from("runs")).join(stem)
}

/// Parses the configuration, runs the subcommand and writes its artifacts.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let path = cli
        .common
        .config
        .as_deref()
        .ok_or_else(|| ConfigError::Invalid { field: "--config".into(), msg: "a configuration file is required".into() })?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&Overrides { seed: cli.common.seed, replicas: cli.common.replicas })?;
    let dir = output_dir(&cli.common, &cfg, path, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from));
    let names = commands::artifact_names(&cfg, cli.command);
    commands::check_writable(&dir, &names, cli.common.force)?;
    let ctx = commands::Context { cfg: &cfg, fingerprint: cfg.fingerprint(), command: cli.command };
    if cli.command == Command::Validate {
        let (artifacts, failure) = commands::validation(&ctx)?;
        let written = commands::write_artifacts(&dir, &names, &artifacts, cli.common.force)?;
        return failure.map_or(Ok(written), Err);
    }
    let artifacts = commands::execute(&ctx)?;
    commands::write_artifacts(&dir, &names, &artifacts, cli.common.force)
}
