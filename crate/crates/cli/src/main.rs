mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nodeflow::flownet::Refiner;
use nodeflow::ode::problems::Problem;
use nodeflow::ode::Method;

/// Neural-ODE optical flow on synthetic data.
#[derive(Debug, Parser)]
#[command(name = "nodeflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key=value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory for every artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets both `train.seed` and `gen.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on freshly generated pairs and evaluate on a held-out set.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a manifest or generated pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest written by `gen`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        refiner: Option<Refiner>,
        #[command(flatten)]
        common: Common,
    },
    /// Predict the flow between two PPM frames.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        image1: PathBuf,
        image2: PathBuf,
        #[arg(long)]
        refiner: Option<Refiner>,
        #[command(flatten)]
        common: Common,
    },
    /// Integrate a built-in analytic problem and report the error.
    Solve {
        #[arg(long, default_value = "exp-growth")]
        problem: Problem,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        step_size: Option<f64>,
        /// Sets both rtol and atol.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        rtol: Option<f64>,
        #[arg(long)]
        atol: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// EPE of the flow decoded at each integration time.
    AblateT {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sorted, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,0.25,0.5,0.75,1,1.5,2,3,5")]
        times: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic dataset with a manifest.
    Gen {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .downcast_ref::<nodeflow::Error>()
                .is_some_and(|e| matches!(e, nodeflow::Error::Diverged(_)));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}
