//! The `mmcot` command line. Exit codes: 0 success, 1 usage or config
//! error, 2 runtime failure.

mod commands;
mod config;

pub use config::{DataPaths, RunConfig, SplitSizes};

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Marks an error as a usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub(crate) fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "mmcot", version, about = "Two-stage multimodal chain-of-thought at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its feature file.
    GenData(GenDataArgs),
    /// Train one stage or one-stage variant.
    Train(TrainArgs),
    /// Run inference with one or two checkpoints.
    Infer(InferArgs),
    /// Score predictions against gold answers and rationales.
    Eval(EvalArgs),
    /// Train and score the variant grid over several seeds.
    Ablate(AblateArgs),
    /// Repeat a command from the manifest it wrote.
    Rerun(RerunArgs),
}

/// Overrides shared by commands that read a config file.
#[derive(Debug, Args, Clone, Default, Serialize, Deserialize)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_colors: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Overrides,
    /// `rationale`, `answer`, or `one:FORMAT` (QCM_A, QCM_RA, QCM_AR).
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub no_vision: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Rationale checkpoint, or a one-stage checkpoint when `--ckpt2` is absent.
    #[arg(long)]
    pub ckpt1: PathBuf,
    /// Answer checkpoint.
    #[arg(long)]
    pub ckpt2: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Feature file; defaults to `features.mmvf` beside `--data`.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}
