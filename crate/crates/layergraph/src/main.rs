use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use layergraph::cli::{self, EvalArgs, LossArg, MetricArg, TrainArgs};

#[derive(Parser)]
#[command(
    name = "layergraph",
    about = "Build, inspect, train, and evaluate layer graphs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a graph spec and print its dependency-ordered schedule.
    Describe {
        /// Path to the .graph spec file
        spec: PathBuf,
    },
    /// Train the graph a spec declares on a data file.
    Train {
        /// Path to the .graph spec file
        spec: PathBuf,
        /// Path to the data file (header `inputs=<k> targets=<m>`)
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = LossArg::Mse)]
        loss: LossArg,
        /// Graph-level seed; defaults to $LAYERGRAPH_SEED, then 0
        #[arg(long)]
        seed: Option<u64>,
        /// Run forward passes through optimized plans
        #[arg(long)]
        compile: bool,
        /// Directory for history.tsv and trained state blobs
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate saved state blobs against a data file.
    Eval {
        /// Path to the .graph spec file
        spec: PathBuf,
        /// Directory holding <node>.<slot>.tsr blobs
        state_dir: PathBuf,
        /// Path to the data file
        data: PathBuf,
        /// Metric to report (repeatable)
        #[arg(long = "metric", value_enum)]
        metrics: Vec<MetricArg>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Describe { spec } => cli::cmd_describe(&spec),
        Command::Train {
            spec,
            data,
            epochs,
            lr,
            loss,
            seed,
            compile,
            out,
        } => cli::cmd_train(&TrainArgs {
            spec,
            data,
            epochs,
            lr,
            loss,
            seed,
            compile,
            out,
        }),
        Command::Eval {
            spec,
            state_dir,
            data,
            metrics,
        } => cli::cmd_eval(&EvalArgs {
            spec,
            state_dir,
            data,
            metrics,
        }),
    };
    ExitCode::from(code as u8)
}
