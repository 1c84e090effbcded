mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Exit codes.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::config(message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl From<gemzsl::Error> for CliError {
    fn from(e: gemzsl::Error) -> Self {
        use gemzsl::Error as E;
        let code = match e {
            E::Config { .. } | E::Generation(_) => EXIT_CONFIG,
            E::Numerical { .. } => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser)]
#[command(name = "gemzsl", version, about = "Gaze-guided attribute attention for zero-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Zsl,
    Gzsl,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write a checkpoint directory with a per-epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train with the gaze loss.
        #[arg(long)]
        gaze: bool,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Score the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "zsl")]
        mode: Mode,
        /// Calibration constant; defaults to the checkpoint's `train.gamma`.
        #[arg(long)]
        gamma: Option<f64>,
        /// Generalized evaluation at every `γ` in `lo:hi:step`.
        #[arg(long, value_name = "LO:HI:STEP")]
        gamma_sweep: Option<String>,
        /// Cosine scale; defaults to the model's.
        #[arg(long)]
        sigma: Option<f64>,
        /// Metrics CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// AUC and NSS of predicted gaze maps on unseen test images.
    GazeEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention and gaze maps of one image as graymaps.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            force,
        } => commands::gen_data(config.as_deref(), &out, seed, force),
        Command::Train {
            data,
            config,
            out,
            gaze,
            seed,
            force,
        } => commands::train(&data, config.as_deref(), &out, gaze, seed, force),
        Command::Eval {
            data,
            ckpt,
            mode,
            gamma,
            gamma_sweep,
            sigma,
            out,
            json,
        } => commands::eval(commands::EvalArgs {
            data: &data,
            ckpt: &ckpt,
            mode,
            gamma,
            gamma_sweep: gamma_sweep.as_deref(),
            sigma,
            out: out.as_deref(),
            json: json.as_deref(),
        }),
        Command::GazeEval { data, ckpt, out } => commands::gaze_eval(&data, &ckpt, out.as_deref()),
        Command::Viz {
            data,
            ckpt,
            image,
            out,
            force,
        } => commands::viz(&data, &ckpt, image, &out, force),
        Command::Gradcheck { corrupt } => commands::gradcheck(corrupt),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
