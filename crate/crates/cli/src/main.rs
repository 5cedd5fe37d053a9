//! `emgspeech` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 internal error.
//! Failures print one line, `error: <Class>: <message>`, on stderr.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emgspeech::Condition;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "emgspeech", version, about = "Neck-EMG speech command recognition pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Global seed; every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "EMGSPEECH_OUT")]
    pub out: Option<PathBuf>,
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CondArg {
    Vocalized,
    Silent,
}

impl From<CondArg> for Condition {
    fn from(c: CondArg) -> Self {
        match c {
            CondArg::Vocalized => Condition::Vocalized,
            CondArg::Silent => Condition::Silent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Global,
    Intersession,
    #[value(name = "incr-a")]
    IncrA,
    #[value(name = "incr-b")]
    IncrB,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Subject id; all subjects when omitted (where supported).
    #[arg(long)]
    pub subject: Option<u32>,
    #[arg(long, value_enum, default_value = "vocalized")]
    pub condition: CondArg,
    /// Window length in ms.
    #[arg(long)]
    pub window_ms: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        subjects: Option<u32>,
        #[arg(long)]
        sessions: Option<u32>,
        #[arg(long)]
        batches: Option<u32>,
        #[arg(long)]
        reps: Option<u32>,
        /// Between-session distribution shift in [0, 1].
        #[arg(long)]
        shift: Option<f64>,
    },
    /// Convert a CSV recording (one row per sample, one column per channel) to SWR1.
    Import {
        #[arg(long)]
        csv: PathBuf,
        /// Events JSON to attach.
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long, default_value_t = emgspeech::DEFAULT_FS_HZ)]
        fs: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Zero-phase high-pass and notch filtering of an SWR1 recording.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a float model on a subject's batches.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Restrict training to these sessions.
        #[arg(long, value_delimiter = ',')]
        sessions: Vec<u32>,
    },
    /// Adapt a trained model on one batch.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        session: u32,
        #[arg(long)]
        batch: u32,
    },
    /// Post-training int8 quantization.
    Quantize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run an evaluation protocol.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        setting: SettingArg,
        /// Session for the incremental scenarios; all sessions when omitted.
        #[arg(long)]
        session: Option<u32>,
        /// Folds trained concurrently.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Inter-session accuracy and ITR across window sizes.
    ItrAblation {
        #[command(flatten)]
        data: DataArgs,
        /// Window sizes in ms.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u32>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Classify a recording with a sliding window; NDJSON on stdout.
    Stream {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        window_ms: Option<u32>,
        #[arg(long)]
        step_ms: Option<u32>,
    },
    /// Summarize evaluation reports across subjects.
    Report {
        /// Report JSON files written by `eval`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
