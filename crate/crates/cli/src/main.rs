use std::path::PathBuf;
use std::process::ExitCode;

use cellseg_cli::commands::{self, ExperimentArgs};
use clap::{Parser, Subcommand};

/// Neural cellular automata for image segmentation.
///
/// Relative output paths are placed under $CELLSEG_OUTPUT_ROOT when it is set.
#[derive(Parser)]
#[command(name = "cellseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evolve fresh states on a dataset's eval split and report pooled IOU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Inline JSON, a JSON file, or `synthetic`.
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long)]
        limit: Option<usize>,
        /// Also write the per-step series here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named experiment.
    Experiment {
        name: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Base run config for experiments that train variants.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<String>,
        /// Training metrics CSV for `regime`; defaults to the one beside the checkpoint.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// JSON file of experiment options; the flags below override it.
        #[arg(long)]
        options: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eval_limit: Option<usize>,
        #[arg(long)]
        train_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stream a live colony over WebSocket and accept perturbation commands.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "synthetic")]
        dataset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start each session paused.
        #[arg(long)]
        paused: bool,
    },
    /// Re-emit a checkpoint after validating its format.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Cmd::Train { config } => commands::train(&config),
        Cmd::Eval { checkpoint, dataset, steps, limit, out } => {
            commands::eval(&checkpoint, &dataset, steps, limit, out.as_deref())
        }
        Cmd::Experiment {
            name,
            checkpoint,
            config,
            dataset,
            metrics,
            options,
            out,
            run_id,
            steps,
            eval_limit,
            train_steps,
            seed,
        } => commands::experiment(
            &name,
            &ExperimentArgs {
                checkpoint,
                config,
                dataset,
                metrics,
                options,
                out,
                run_id,
                steps,
                eval_limit,
                train_steps,
                seed,
            },
        ),
        Cmd::Serve { checkpoint, port, dataset, seed, paused } => {
            commands::serve(&checkpoint, port, &dataset, seed, paused)
        }
        Cmd::Export { checkpoint, out } => commands::export(&checkpoint, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
