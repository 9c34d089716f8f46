use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use subtomo::studies::StudyKindName;

mod commands;
mod config;
mod output;

use config::ConfigFile;

#[derive(Parser, Debug)]
#[command(name = "subtomo", version, about = "Effective dimension of class manifolds by probing random affine cuts")]
struct Cli {
    /// TOML config file; sections missing from it use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for probe sweeps. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Probe a field over cut dimensions, fit the curve and report d*.
    Tomography,
    /// Closest approach of random affine subspaces versus the scaling law.
    AffineDistance,
    /// Train a toy classifier and save it with its data.
    Train,
    /// Run a trend study over a grid of training or probing settings.
    Study {
        #[arg(value_enum)]
        kind: StudyArg,
    },
    /// PCA-90, participation ratio and effective dimension per class.
    DatasetDim,
    /// Gordon escape bounds for spherical caps, with empirical miss rates.
    Gordon,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StudyArg {
    RandomLabels,
    TrainsetSize,
    Ensemble,
    Width,
    Sparsity,
    TrainingStage,
}

impl From<StudyArg> for StudyKindName {
    fn from(a: StudyArg) -> Self {
        match a {
            StudyArg::RandomLabels => Self::RandomLabels,
            StudyArg::TrainsetSize => Self::TrainsetSize,
            StudyArg::Ensemble => Self::Ensemble,
            StudyArg::Width => Self::Width,
            StudyArg::Sparsity => Self::Sparsity,
            StudyArg::TrainingStage => Self::TrainingStage,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<subtomo::Error> for CliError {
    fn from(e: subtomo::Error) -> Self {
        use subtomo::Error as E;
        match e {
            E::InvalidParameter(_)
            | E::InvalidDimension(_)
            | E::InvalidTarget(_)
            | E::ClassOutOfRange { .. }
            | E::NotEnoughSamples { .. }
            | E::InfeasiblePacking { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub struct Context {
    pub config: ConfigFile,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let out_dir = cli.out_dir.clone().or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    if cli.threads == Some(0) {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let ctx = Context { config, seed, out_dir };
    pool.install(|| match cli.command {
        Command::Tomography => commands::tomography(&ctx),
        Command::AffineDistance => commands::affine_distance(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Study { kind } => commands::study(&ctx, kind.into()),
        Command::DatasetDim => commands::dataset_dim(&ctx),
        Command::Gordon => commands::gordon(&ctx),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
