//! Command-line front end.
//!
//! Every command writes `manifest.json` into its output directory before
//! doing any work and `outputs.json` (SHA-256 of each output file) when it
//! finishes; `replay` reruns a manifest and compares the two.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{hash_file, read_outputs, OutputRecord, RunManifest, MANIFEST_FILE, OUTPUTS_FILE};

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configs or inputs; nothing was computed.
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
    /// A verification or replay comparison failed.
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Check(_) => EXIT_CHECK,
        }
    }
}

impl From<crate::train::TrainError> for CliError {
    fn from(e: crate::train::TrainError) -> Self {
        use crate::train::TrainError as T;
        match e {
            T::Config(_) | T::Kv(_) | T::Dataset(_) | T::Checkpoint(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<crate::eval::EvalError> for CliError {
    fn from(e: crate::eval::EvalError) -> Self {
        match e {
            crate::eval::EvalError::Invalid(m) => CliError::Invalid(m),
            crate::eval::EvalError::Train(t) => (*t).into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "icql", version, about = "In-context Q-learning on synthetic MDPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
pub enum Command {
    /// Roll out a behavior policy and write a transition dataset.
    GenData(GenDataArgs),
    /// Train a critic and policy on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: policy rollouts and Q accuracy.
    Eval(EvalArgs),
    /// Run the randomized self-check suites.
    Verify(VerifyArgs),
    /// Train and evaluate every cell of a grid for each dataset.
    Ablate(AblateArgs),
    /// Dump (s, a, Q̂, Q_oracle) rows for a sample of state-action pairs.
    Qdump(QdumpArgs),
    /// Rerun a manifest into a new directory and compare output hashes.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Verify(_) => "verify",
            Command::Ablate(_) => "ablate",
            Command::Qdump(_) => "qdump",
            Command::Replay(_) => "replay",
        }
    }

    /// The output directory, if the command has one.
    pub fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::GenData(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Eval(a) => Some(&a.out),
            Command::Verify(a) => a.out.as_ref(),
            Command::Ablate(a) => Some(&a.out),
            Command::Qdump(a) => Some(&a.out),
            Command::Replay(a) => Some(&a.out),
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::GenData(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Eval(a) => a.out = out,
            Command::Verify(a) => a.out = Some(out),
            Command::Ablate(a) => a.out = out,
            Command::Qdump(a) => a.out = out,
            Command::Replay(a) => a.out = out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    /// Env family (chain, four-rooms, point-mass) or a key=value spec file.
    #[arg(long, default_value = "four-rooms")]
    pub env: String,
    /// Env spec overrides, `key=value`; last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Behavior spec, e.g. `optimal:0.3`, `uniform`, `0.5*optimal:0.1+0.5*decoy:0.1`.
    #[arg(long, default_value = "optimal:0.3")]
    pub behavior: String,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    /// Step cap per episode; defaults to the env horizon.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// key=value training config; absent keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Config overrides, `key=value`; applied after --config, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Checkpoint to resume from; its config is used unless --config is given.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rollout episodes; defaults to the checkpoint config's eval_episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Eval seed; defaults to the checkpoint config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Subsample the theorem grid and shrink the other suites.
    #[arg(long)]
    pub quick: bool,
    /// Read the stack output without negation (mutation check).
    #[arg(long)]
    pub inject_sign_flip: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// One dataset per seed; repeat the flag.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Training seed per dataset; defaults to each dataset's generation seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub context: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub retrieval: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct QdumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Monte-Carlo rollouts per pair on continuous envs.
    #[arg(long, default_value_t = 32)]
    pub mc_rollouts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fresh directory for the rerun's outputs.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code. Messages go to stdout/stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the rayon pool at `ICQL_THREADS` workers.
fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("ICQL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Invalid(format!("ICQL_THREADS must be a positive integer, got `{v}`")))?;
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: &Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => commands::gen_data(command, a),
        Command::Train(a) => commands::train(command, a),
        Command::Eval(a) => commands::eval(command, a),
        Command::Verify(a) => commands::verify(command, a),
        Command::Ablate(a) => commands::ablate(command, a),
        Command::Qdump(a) => commands::qdump(command, a),
        Command::Replay(a) => commands::replay(a),
    }
}
