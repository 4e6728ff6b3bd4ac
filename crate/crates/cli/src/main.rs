//! `weightscrub`: train, scrub and evaluate small classifiers from a TOML
//! run configuration.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "weightscrub", version, about = "Selective forgetting for small classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seeds, e.g. `--seeds 0,1,2`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads for seed loops; 1 runs sequentially.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the configured dataset (and test set) as CSV.
    GenData(Common),
    /// Trains one model per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on the retain set only.
        #[arg(long)]
        retain: bool,
    },
    /// Scrubs a checkpoint, or freshly trained models when none is given.
    Scrub {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Error rates, entropy histograms and relearn time of a model.
    Eval {
        #[command(flatten)]
        common: Common,
        /// A checkpoint; its `.json` sidecar, when present, supplies the hidden class.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Local information bound of the configured scrub.
    Bound(Common),
    /// Runs a named experiment and writes `<name>.csv` and `<name>.json`.
    Experiment {
        name: Experiment,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    Fig1Logistic,
    LambdaSweep,
    CohortSweep,
    Interpolation,
    Relearn,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig1Logistic => "fig1_logistic",
            Experiment::LambdaSweep => "lambda_sweep",
            Experiment::CohortSweep => "cohort_sweep",
            Experiment::Interpolation => "interpolation",
            Experiment::Relearn => "relearn",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    ConfigParse { path: PathBuf, message: String },
    Core(weightscrub::Error),
    Usage(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(weightscrub::Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigParse { .. } => "config_parse",
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
        }
    }

    /// 2 for anything wrong with the request itself, 1 for runtime failures.
    fn exit_code(&self) -> u8 {
        use weightscrub::Error as E;
        match self {
            CliError::ConfigParse { .. } | CliError::Usage(_) => 2,
            CliError::Core(
                E::InvalidConfig { .. } | E::HidingRequiresWholeClass | E::NoiselessMethod(_) | E::InvalidModel(_) | E::InvalidSpec(_),
            ) => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::ConfigParse { path, message } => write!(f, "cannot parse {}: {}", path.display(), message.trim_end()),
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<weightscrub::Error> for CliError {
    fn from(e: weightscrub::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(weightscrub::Error::Json(e))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, out) = match &cli.command {
        Command::GenData(c) => ("gen-data", &c.out),
        Command::Train { common, .. } => ("train", &common.out),
        Command::Scrub { common, .. } => ("scrub", &common.out),
        Command::Eval { common, .. } => ("eval", &common.out),
        Command::Bound(c) => ("bound", &c.out),
        Command::Experiment { common, .. } => ("experiment", &common.out),
    };
    let result = match &cli.command {
        Command::GenData(c) => commands::gen_data(c),
        Command::Train { common, retain } => commands::train(common, *retain),
        Command::Scrub { common, weights } => commands::scrub(common, weights.as_deref()),
        Command::Eval { common, weights } => commands::eval(common, weights.as_deref()),
        Command::Bound(c) => commands::bound(c),
        Command::Experiment { name, common } => commands::experiment(common, *name),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({
                "error": { "kind": e.kind(), "message": e.to_string() },
                "command": command,
                "partial": true,
            });
            eprintln!("{record}");
            // best effort: the directory may be what failed
            if std::fs::create_dir_all(out).is_ok() {
                let _ = std::fs::write(out.join("error.json"), format!("{record:#}\n"));
            }
            ExitCode::from(e.exit_code())
        }
    }
}
