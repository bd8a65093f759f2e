//! `nrs` command-line tool: synthetic data, training, evaluation, one-shot
//! selection and the HTTP service.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "nrs", version, about = "Neural response selection for multi-agent dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Qr,
    Cqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HistoryArg {
    Oracle,
    Rollout,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSONL path; the manifest goes next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train all phases, writing one checkpoint per phase and a JSONL log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated phases to skip: conv, ss.
        #[arg(long, value_delimiter = ',')]
        skip_phases: Vec<String>,
    },
    /// Accuracy with a 95% interval on one split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        seed: Option<u64>,
        /// Engine history: gold responses or the selector's own choices.
        #[arg(long, value_enum, default_value = "oracle")]
        history: HistoryArg,
        /// Earlier report to test for a significant difference.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep per-turn selections in the written report.
        #[arg(long)]
        records: bool,
    },
    /// Pick one response for a single dialogue state.
    Select {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON array of {"speaker","text"}.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        query: String,
        /// JSON array of {"agent","text"}.
        #[arg(long)]
        candidates: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        /// Service config JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData { config, seed, out } => commands::gen_data(config.as_deref(), seed, out),
        Command::Train {
            config,
            data,
            out,
            seed,
            skip_phases,
        } => commands::train(config.as_deref(), data, out, seed, &skip_phases),
        Command::Eval {
            config,
            checkpoint,
            baseline,
            data,
            split,
            seed,
            history,
            compare,
            out,
            records,
        } => commands::eval(commands::EvalArgs {
            config,
            checkpoint,
            baseline,
            data,
            split,
            seed,
            history,
            compare,
            out,
            records,
        }),
        Command::Select {
            config,
            checkpoint,
            history,
            query,
            candidates,
        } => commands::select(config.as_deref(), &checkpoint, history.as_deref(), &query, &candidates),
        Command::Serve {
            config,
            listen,
            checkpoint,
        } => commands::serve(&config, listen, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
