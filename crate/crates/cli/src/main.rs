// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tarot`: generate tasks, pretrain a toy model, search rotation
//! interventions, evaluate and analyze them.
//!
//! Every command writes into `<out-dir>/<command>-<hash>/` and prints that
//! directory. Exit codes: 0 success, 1 I/O failure, 2 invalid input,
//! 3 numerical failure.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tarot_core::analysis::LensNorm;

use crate::commands::{AnalysisName, Global};
use crate::config::{MechanismName, ObjectiveName};

#[derive(Parser)]
#[command(name = "tarot", version, about = "Rotation interventions on a toy transformer")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Overrides the seed in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Record wall-clock time in the manifest (makes it differ across runs).
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task: corpus plus optimization, evaluation and pool splits.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the base model on a corpus.
    TrainBase {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Search an intervention with Bayesian optimization.
    Optimize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Demonstration pool for few-shot objectives.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mechanism: Option<MechanismName>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveName>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Comma-separated layer indices.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Score a dataset with or without an intervention.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Intervention JSON, or `none`.
        #[arg(long, default_value = "none")]
        config: String,
        #[arg(long, default_value_t = 0)]
        shots: usize,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveName>,
        #[arg(long, default_value_t = 4)]
        max_new_tokens: usize,
    },
    /// Logit-lens and unembedding diagnostics.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "none")]
        config: String,
        #[arg(long, value_enum)]
        which: AnalysisName,
        #[arg(long, value_enum, default_value = "final")]
        lens: LensArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LensArg {
    Final,
    PerLayer,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let g = Global {
        seed: cli.global.seed,
        out_dir: cli.global.out_dir,
        timing: cli.global.timing,
    };
    let result = match &cli.command {
        Command::GenData { config } => commands::gen_data(&g, config.as_deref()),
        Command::TrainBase { corpus, config, steps, batch_size, learning_rate } => commands::train_base(
            &g,
            &commands::TrainArgs {
                corpus,
                config: config.as_deref(),
                steps: *steps,
                batch_size: *batch_size,
                learning_rate: *learning_rate,
            },
        ),
        Command::Optimize { checkpoint, dataset, pool, config, mechanism, objective, iterations, layers, shots } => {
            commands::optimize(
                &g,
                &commands::OptimizeArgs {
                    checkpoint,
                    dataset,
                    pool: pool.as_deref(),
                    config: config.as_deref(),
                    mechanism: *mechanism,
                    objective: *objective,
                    iterations: *iterations,
                    layers: layers.clone(),
                    shots: *shots,
                },
            )
        }
        Command::Eval { checkpoint, dataset, config, shots, pool, objective, max_new_tokens } => commands::eval(
            &g,
            &commands::EvalArgs {
                checkpoint,
                dataset,
                config,
                shots: *shots,
                pool: pool.as_deref(),
                objective: *objective,
                max_new_tokens: *max_new_tokens,
            },
        ),
        Command::Analyze { checkpoint, dataset, config, which, lens } => commands::analyze(
            &g,
            &commands::AnalyzeArgs {
                checkpoint,
                dataset,
                config,
                which: *which,
                lens: match lens {
                    LensArg::Final => LensNorm::Final,
                    LensArg::PerLayer => LensNorm::PerLayer,
                },
            },
        ),
    };
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code())
        }
    }
}
