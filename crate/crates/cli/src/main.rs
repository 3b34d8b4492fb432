use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mct_cli::*;

/// Multi-class-token transformer localization harness.
///
/// Exit codes: 0 success, 1 usage error, 2 data/format error,
/// 3 numerical failure.
#[derive(Parser)]
#[command(name = "mct", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-label dataset with pixel ground truth.
    Gen {
        /// Dataset spec file (key=value lines).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus loss curve.
    Train {
        /// Dataset directory from `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Model config file (key=value); defaults derive from the dataset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Enable train-time horizontal flips.
        #[arg(long, default_value_t = false)]
        flip: bool,
        /// Output checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract localization maps as PGM images plus MCT1 tensors.
    Maps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// attention|patchcam|fused|refined|all
        #[arg(long, default_value = "all")]
        kind: String,
        /// Top-K layers to fuse (defaults to the checkpoint config).
        #[arg(long)]
        k: Option<usize>,
        /// Refinement iterations (defaults to the checkpoint config).
        #[arg(long)]
        iterations: Option<usize>,
        /// gt|pred|none
        #[arg(long, default_value = "gt")]
        class_filter: String,
        /// Only process the first N samples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate seed maps against pixel ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// attention|patchcam|fused|refined
        #[arg(long, default_value = "refined")]
        kind: String,
        /// Background threshold.
        #[arg(long, default_value_t = 0.35)]
        tau: f64,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// gt|pred|none
        #[arg(long, default_value = "gt")]
        class_filter: String,
        /// Metric report CSV path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run an ablation study end to end.
    Ablate {
        /// pooling|cct-depth|k-sweep|pipeline
        #[arg(long)]
        study: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.35)]
        tau: f64,
        /// Output directory for study CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient suite; exits nonzero on failure.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates probed per parameter tensor.
        #[arg(long, default_value_t = 12)]
        samples: usize,
    },
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Gen { spec, out } => run_gen(&GenArgs { spec, out }),
        Cmd::Train {
            data,
            config,
            seed,
            epochs,
            batch_size,
            lr,
            flip,
            out,
        } => run_train(&TrainArgs {
            data,
            config,
            seed,
            epochs,
            batch_size,
            lr,
            flip,
            out,
        }),
        Cmd::Maps {
            checkpoint,
            data,
            kind,
            k,
            iterations,
            class_filter,
            limit,
            out,
        } => run_maps(&MapsArgs {
            checkpoint,
            data,
            kind,
            k,
            iterations,
            class_filter,
            limit,
            out,
        }),
        Cmd::Eval {
            checkpoint,
            data,
            kind,
            tau,
            k,
            iterations,
            class_filter,
            report,
        } => run_eval(&EvalArgs {
            checkpoint,
            data,
            kind,
            tau,
            k,
            iterations,
            class_filter,
            report,
        }),
        Cmd::Ablate {
            study,
            data,
            seed,
            epochs,
            config,
            tau,
            out,
        } => run_ablate(&AblateArgs {
            study,
            data,
            seed,
            epochs,
            config,
            tau,
            out,
        }),
        Cmd::Gradcheck {
            config,
            seed,
            samples,
        } => run_gradcheck(&GradcheckArgs {
            config,
            seed,
            samples,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are success, anything else is usage
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mct: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
