//! Command-line driver. [`run`] parses arguments, executes one subcommand
//! and writes its artifacts plus a run manifest.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use manifest::RunManifest;

#[derive(Debug, Parser, Serialize)]
#[command(name = "filab", version, about = "Toy-transformer interpretability toolkit")]
pub struct Cli {
    /// Worker threads for sweeps and batch evaluation (0 = all cores).
    #[arg(long, global = true, env = "FILAB_THREADS")]
    pub threads: Option<usize>,
    /// Single-threaded execution with fixed-order reductions.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train a toy model on the k-varied mixture.
    Train(commands::TrainArgs),
    /// Sample base/contrast prompt pairs as JSONL.
    GenTasks(commands::GenTasksArgs),
    /// Print the ground-truth answer for one input.
    Oracle(commands::OracleArgs),
    /// Greedy-decoding accuracy on contrast prompts.
    Eval(commands::EvalArgs),
    /// Path-patch every head into one receiver.
    PatchSweep(commands::PatchSweepArgs),
    /// Path-patch a sender set into one receiver.
    PathPatch(commands::PathPatchArgs),
    /// Accuracy with a head set ablated.
    Ablate(commands::AblateArgs),
    /// Faithfulness, completeness and minimality of a circuit.
    CircuitEval(commands::CircuitEvalArgs),
    /// Per-layer logits decoded from the residual stream.
    LogitLens(commands::LogitLensArgs),
    /// Function-vector injection heatmap on naive prompts.
    FvHeatmap(commands::FvHeatmapArgs),
    /// Base-8 adjustment counts per Listing case.
    Base8Table(commands::Base8TableArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::GenTasks(_) => "gen-tasks",
            Command::Oracle(_) => "oracle",
            Command::Eval(_) => "eval",
            Command::PatchSweep(_) => "patch-sweep",
            Command::PathPatch(_) => "path-patch",
            Command::Ablate(_) => "ablate",
            Command::CircuitEval(_) => "circuit-eval",
            Command::LogitLens(_) => "logit-lens",
            Command::FvHeatmap(_) => "fv-heatmap",
            Command::Base8Table(_) => "base8-table",
        }
    }
}

/// Shared task selection flags.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TaskArgs {
    /// Task name: off-by-K, unary-off-by-K, caesar[-K], base-K, mcqa[-K].
    #[arg(long)]
    pub task: String,
    /// Overrides the offset (or radix) in the task name.
    #[arg(long, allow_hyphen_values = true)]
    pub k: Option<i32>,
    /// In-context examples per prompt.
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// disjoint, none or overlap (default: the task's own).
    #[arg(long)]
    pub constraint: Option<String>,
    /// Question records for mcqa tasks (CSV: question, four choices, answer letter).
    #[arg(long)]
    pub mcqa: Option<PathBuf>,
}

pub(crate) enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Runs one command line. Returns 0 on success, 1 on usage errors and 2 on
/// runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = if cli.deterministic { 1 } else { cli.threads.unwrap_or(0) };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match pool.install(|| manifest::execute(&cli, args)) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nFor more information, try '--help'.");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
