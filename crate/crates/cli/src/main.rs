use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Exit codes: 0 success, 1 gradient check failure, 2 I/O or format error,
/// 3 missing input artifact, 4 checkpoint does not match the architecture.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing {what}: {path} does not exist")]
    Missing { what: &'static str, path: PathBuf },
    #[error(transparent)]
    Core(#[from] adcrowd::Error),
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Gradcheck(_) => 1,
            CliError::Format(_) | CliError::Io { .. } => 2,
            CliError::Missing { .. } => 3,
            CliError::Core(adcrowd::Error::Checkpoint(_)) => 4,
            CliError::Core(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "adcrowd", version, about = "Attention-guided deformable crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides rng_seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (PGM images, DMAP ground truth, manifest).
    Synth,
    /// Train the attention map generator.
    TrainAmg,
    /// Train the density map estimator for the configured variant.
    TrainDme,
    /// Score a trained pipeline on a test split.
    Eval,
    /// Count one PGM image.
    Infer {
        image: PathBuf,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        cfg.apply_text(&text, &path.display().to_string())?;
    }
    for entry in &cli.set {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Format(format!("--set expects KEY=VALUE, got {entry:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Format)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("rng_seed", &seed.to_string()).map_err(CliError::Format)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => commands::synth(&cfg, out),
        Command::TrainAmg => commands::train_amg(&cfg, out),
        Command::TrainDme => commands::train_dme(&cfg, out),
        Command::Eval => commands::eval(&cfg, out),
        Command::Infer { image } => commands::infer(&cfg, out, image),
        Command::Gradcheck { inject_fault } => commands::gradcheck(*inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
