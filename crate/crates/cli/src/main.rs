//! `mmfuse` command line: data generation, training, distillation,
//! evaluation and the fusion-token sweep.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O
//! error, 4 numeric failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mmfuse::model::Role;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError {
            code: 3,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<mmfuse::Error> for CliError {
    fn from(e: mmfuse::Error) -> Self {
        use mmfuse::Error as E;
        let code = match &e {
            E::Io { .. } | E::Ingestion { .. } => 3,
            E::Numeric { .. } | E::Diverged { .. } => 4,
            E::Dimension(_) | E::Bounds(_) | E::Contract(_) | E::Config(_) | E::Json { .. } => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Multi-modal fusion transformer with knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        /// Synthetic spec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher or a student on hard labels.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a student against a frozen teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher_ckpt: PathBuf,
        /// Also train a plain student and report teacher, student and
        /// distilled student side by side.
        #[arg(long)]
        compare_raw: bool,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint; `--protocol loso` runs every fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "loso")]
        protocol: String,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Also write eval.csv and report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one teacher per fusion token count.
    AblateTokens {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        tokens: Vec<usize>,
        #[arg(long)]
        force: bool,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("MMFUSE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("MMFUSE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData { spec, out } => commands::gen_data(spec.as_deref(), &out),
        Command::Train { config, model, force } => {
            let role = match model {
                ModelArg::Teacher => Role::Teacher,
                ModelArg::Student => Role::Student,
            };
            let dir = commands::cmd_train(&config, role, force)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Distill {
            config,
            teacher_ckpt,
            compare_raw,
            force,
        } => {
            let dir = commands::cmd_distill(&config, &teacher_ckpt, compare_raw, force)?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            dataset,
            protocol,
            batch_size,
            out,
        } => {
            let protocol = commands::parse_eval_protocol(&protocol)?;
            let csv = commands::cmd_eval(&checkpoint, &dataset, protocol, batch_size, out.as_deref())?;
            print!("{csv}");
            Ok(())
        }
        Command::AblateTokens { config, tokens, force } => {
            let dir = commands::cmd_ablate_tokens(&config, &tokens, force)?;
            println!("{}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
