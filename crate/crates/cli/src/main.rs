//! `mrgpssm`: simulate, train, predict, evaluate, grid-search and verify.

mod commands;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "mrgpssm",
    version,
    about = "Multi-resolution Gaussian process state-space models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth channels.
    Simulate(SimulateArgs),
    /// Train a model by backfitting its components.
    Train(TrainArgs),
    /// Free-run a trained model and write predictive moments.
    Predict(PredictArgs),
    /// Score predictions against observed outputs.
    Eval(EvalArgs),
    /// Train one single-component model per resolution and tabulate test metrics.
    Gridsearch(GridArgs),
    /// Run the equivalence and property checks.
    Verify(VerifyArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Kind {
    Pendulum,
    Multiscale,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Generator configuration (JSON); defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV; truth channels go next to it as `<stem>_truth.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

/// Training options shared by `train` and `gridsearch`. Flags override the
/// configuration file.
#[derive(Args, Debug, Clone, Default)]
struct TrainOpts {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cycles: Option<usize>,
    /// Iterations per component update.
    #[arg(long)]
    iters: Option<usize>,
    /// Observations per dilated mini-batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Warm-up steps before the scored window.
    #[arg(long)]
    buffer: Option<usize>,
    /// Monte Carlo samples per mini-batch.
    #[arg(long)]
    samples: Option<usize>,
    /// Mini-batches averaged per iteration.
    #[arg(long)]
    minibatches: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    inducing: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    /// Component list such as `R=30:d=2,R=1:d=2`.
    #[arg(long, required_unless_present = "manifest")]
    components: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for manifest, model and log.
    #[arg(long)]
    out: PathBuf,
    /// Re-run a previous training from its manifest.
    #[arg(long, conflicts_with_all = ["data", "components", "seed", "config"])]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample paths per component.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Model whose normalization defines the scoring units.
    #[arg(long, required_unless_present = "raw")]
    model: Option<PathBuf>,
    /// First row to score.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Score in the original data units.
    #[arg(long)]
    raw: bool,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated resolutions.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1,5,10,20,30,40,50,60,70"
    )]
    grid: Vec<usize>,
    /// Latent dimension of each model.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long)]
    seed: u64,
    /// Leading fraction of rows used for training.
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Table CSV; a long-format copy goes to `<stem>_long.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum MutationArg {
    None,
    BrokenKernelRescaling,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Inject a known defect to confirm the suite detects it.
    #[arg(long, value_enum, default_value = "none")]
    mutate: MutationArg,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gridsearch(a) => commands::gridsearch(&a),
        Command::Verify(a) => commands::verify(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
