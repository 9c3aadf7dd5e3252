//! `mergelab` command-line front end.
//!
//! Every subcommand writes its outputs under `--out` together with a
//! `manifest.json`. Exit status is 0 on success, 1 on usage or input errors
//! and 2 when a gate or check fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mergelab::bounds::Grid;
use mergelab::MergeError;

#[derive(Debug, Parser)]
#[command(
    name = "mergelab",
    version,
    about = "Layer-wise model merging laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Experiment configuration as JSON; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic task suite as CSV files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long = "T", visible_alias = "tasks")]
        tasks: Option<usize>,
        #[arg(long = "C", visible_alias = "classes")]
        classes: Option<usize>,
        #[arg(long = "d", visible_alias = "dim")]
        dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain the shared model and fine-tune per-task checkpoints.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Write only this task's checkpoint (all tasks are still trained).
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Merge a checkpoint directory with one method.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        method: String,
        /// Calibration rows per task.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a saved model on every task's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the bound-lab checks.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// One of decomposition, pertask, merged, excess, pinsker, or all.
        #[arg(long, default_value = "all")]
        check: String,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scan the loss surface around a model along two task vectors.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: PathBuf,
        /// Centre of the scan; the pretrained model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// `a0:a1:n,b0:b1:m`, or one axis for a 1-D slice.
        #[arg(long)]
        grid: Option<Grid>,
        /// Task indices spanning the plane, as `i,j`.
        #[arg(long)]
        directions: Option<String>,
    },
    /// Sweep one setting across seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lam_init, rho or k.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: Option<String>,
    },
    /// Regenerate every table, sweep, figure and bound check.
    Reproduce {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more gates failed; see manifest.json");
            ExitCode::from(2)
        }
        Err(MergeError::Gate(msg)) => {
            eprintln!("gate failed: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
