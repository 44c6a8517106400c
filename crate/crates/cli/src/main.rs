//! `kaf`: simulate, train, forecast and compare from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "kaf", version, about = "Kernel analog forecasting of partially observed multiscale systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a system and write a trajectory file.
    Simulate(SimulateArgs),
    /// Build the kernel basis for a trajectory.
    Train(TrainArgs),
    /// Report the automatically tuned kernel bandwidth.
    Tune(TuneArgs),
    /// Forecast an observable over a lead-time grid.
    Forecast(ForecastArgs),
    /// Invariant density and analytic eigenfunctions of the double-well limit.
    Oracle(OracleArgs),
    /// Gaussian-process closure of the slow Lorenz 96 variables.
    Closure {
        #[command(subcommand)]
        command: ClosureCommand,
    },
    /// KAF against Lorenz's analog method from chosen initial observations.
    Compare(CompareArgs),
    /// Run a full experiment recipe or config and write its bundle.
    Run(RunArgs),
    /// Print a built-in recipe as TOML.
    Recipe {
        name: String,
    },
    /// Re-run a manifest and check every output hash.
    Repro {
        manifest: PathBuf,
        /// Directory for the rerun (default: a `repro` folder next to the manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SystemKind {
    L63,
    Sde,
    L96,
    L96Closed,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    system: SystemKind,
    /// TOML file with the system parameters (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20000)]
    samples: usize,
    /// Spin-up time dropped before the first sample.
    #[arg(long, default_value_t = 10.0)]
    discard: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the trajectory as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// GP closure file for `l96-closed`.
    #[arg(long, conflicts_with = "constant")]
    closure: Option<PathBuf>,
    /// Constant closure value for `l96-closed`.
    #[arg(long)]
    constant: Option<f64>,
    /// RK4 step for `l96-closed`.
    #[arg(long, default_value_t = 0.01)]
    step: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training trajectory; repeat to concatenate several.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Observed state columns, e.g. `0,1,2` or `0..9`.
    #[arg(long, default_value = "0")]
    columns: String,
    /// Use only the first N rows for the kernel.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 100)]
    basis_size: usize,
    /// Kernel parameters as TOML; tuned automatically when absent.
    #[arg(long)]
    kernel: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write `q, r, v, w` per training point as CSV.
    #[arg(long)]
    dump_kernel: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0")]
    columns: String,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[arg(long)]
    basis: PathBuf,
    /// The trajectory the basis was trained on.
    #[arg(long)]
    train: PathBuf,
    /// Out-of-sample trajectory, split 50/25/25 into validation, variance
    /// validation and test starts.
    #[arg(long)]
    test: PathBuf,
    /// `col:N` or `sq:N`.
    #[arg(long, default_value = "col:0")]
    observable: String,
    #[arg(long, default_value_t = 20.0)]
    tau_max: f64,
    /// Lead spacing; one sampling interval when absent.
    #[arg(long)]
    tau_step: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
struct OracleArgs {
    #[command(subcommand)]
    mc: Option<OracleCommand>,
    /// Noise level, or `auto` to fit it to `--data`.
    #[arg(long, default_value = "auto")]
    sigma: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    column: usize,
    #[arg(long, value_enum, default_value_t = PotentialKind::PlusMinusOne)]
    potential: PotentialKind,
    #[arg(long, default_value_t = 6)]
    harmonics: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PotentialKind {
    /// Wells at -1 and 1 (the Lorenz 63 driven drift).
    PlusMinusOne,
    /// Wells at 0 and 1.
    ZeroOne,
}

#[derive(Subcommand, Debug)]
enum OracleCommand {
    /// Monte-Carlo conditional mean and variance of the double-well SDE.
    Mc(McArgs),
}

#[derive(Args, Debug)]
struct McArgs {
    #[arg(long, allow_hyphen_values = true)]
    x0: f64,
    #[arg(long, default_value_t = 10000)]
    paths: usize,
    #[arg(long, default_value_t = 0.07)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = PotentialKind::PlusMinusOne)]
    potential: PotentialKind,
    #[arg(long, default_value_t = 20.0)]
    tau_max: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ClosureCommand {
    /// Fit the GP closure to a two-scale Lorenz 96 trajectory.
    Fit(ClosureFitArgs),
    /// RMSE of the four predictors for one regime.
    Compare(ClosureCompareArgs),
}

#[derive(Args, Debug)]
struct ClosureFitArgs {
    #[arg(long)]
    data: PathBuf,
    /// L96 parameters the data was generated with (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    subsample: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the closure mean on a grid as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Regime {
    Periodic,
    Quasiperiodic,
    Chaotic,
}

#[derive(Args, Debug)]
struct ClosureCompareArgs {
    #[arg(long, value_enum)]
    regime: Regime,
    #[arg(long)]
    out: PathBuf,
    /// Shrink the training set (default: the recipe's size).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Experiment config; see `--recipe` for a built-in one.
    #[arg(long, conflicts_with = "recipe")]
    config: Option<PathBuf>,
    #[arg(long)]
    recipe: Option<String>,
    /// Initial observation (comma-separated for vector observations); repeatable.
    #[arg(long = "x0", required = true, allow_hyphen_values = true)]
    x0: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, conflicts_with = "recipe")]
    config: Option<PathBuf>,
    #[arg(long)]
    recipe: Option<String>,
    /// Output directory (default: the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_threads() -> Result<(), String> {
    if let Ok(v) = std::env::var("KAF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("KAF_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
