//! `stefan`: exact solution, finite-difference reference, convergence study,
//! network training and evaluation for the one-dimensional melting problem.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stefan_pinn::StefanError;

const SUBCOMMANDS: [&str; 6] = ["exact", "fd", "converge", "train", "eval", "ensemble"];

#[derive(Parser, Debug)]
#[command(name = "stefan", version, about = "Stefan problem: exact, finite-difference and PINN solvers")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Output directory root.
    #[arg(long, global = true, env = "STEFAN_OUT", default_value = "stefan-out")]
    pub out: PathBuf,

    /// Recipe file with `key = value` lines and `[subcommand]` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Interface constant and the exact temperature at selected times.
    Exact(ExactArgs),
    /// Crank–Nicolson / Newton reference solve.
    Fd(FdArgs),
    /// Grid-refinement study of the reference solver.
    Converge(ConvergeArgs),
    /// Train one network.
    Train(TrainArgs),
    /// Evaluate a saved network against the reference.
    Eval(EvalArgs),
    /// Train one network per seed and aggregate the errors.
    Ensemble(EnsembleArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ProblemArgs {
    #[arg(long, default_value_t = 0.5)]
    pub ste: f64,
    #[arg(long, default_value_t = 0.01)]
    pub fo: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub theta_l: f64,
    #[arg(long, default_value_t = -0.1, allow_hyphen_values = true)]
    pub theta_r: f64,
    /// Accepted by every subcommand; only training uses it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ExactArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Spatial samples per time.
    #[arg(long, default_value_t = 101)]
    pub nx: usize,
    /// Comma-separated times.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.53, 1.0])]
    pub times: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct FdArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    /// Space and time step, e.g. `1/1024` or `0.001`.
    #[arg(long, default_value = "1/1024", value_parser = parse_step)]
    pub h: f64,
    /// Spatial node count; overrides the spacing implied by `--h`.
    #[arg(long)]
    pub nx: Option<usize>,
    /// Time step; overrides `--h` in time.
    #[arg(long, value_parser = parse_step)]
    pub dt: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ConvergeArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_step, default_value = "1/64,1/128,1/256")]
    pub steps: Vec<f64>,
    #[arg(long, default_value = "1/1024", value_parser = parse_step)]
    pub h_min: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ReferenceArgs {
    /// Step of the reference solve; defaults to 1/1024, or 1/4096 when Ste < 0.05.
    #[arg(long, value_parser = parse_step)]
    pub ref_h: Option<f64>,
    #[arg(long, default_value_t = 500)]
    pub eval_nt: usize,
    #[arg(long, default_value_t = 500)]
    pub eval_nx: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    /// uniform, static, dynamic, pointwise, seq-uniform, seq-static or seq-dynamic.
    #[arg(long, default_value = "uniform")]
    pub regime: String,
    #[arg(long, visible_alias = "iters", default_value_t = 100_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1024)]
    pub n_initial: usize,
    #[arg(long, default_value_t = 256)]
    pub n_boundary: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_residual: usize,
    /// Comma-separated layer widths including input and output.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_eta: Option<f64>,
    #[arg(long)]
    pub lr_gamma: Option<f64>,
    #[arg(long)]
    pub lr_kappa: Option<f64>,
    /// Initial-loss weight of the static regime.
    #[arg(long)]
    pub omega0: Option<f64>,
    #[arg(long)]
    pub dynamic_alpha: Option<f64>,
    #[arg(long)]
    pub dynamic_every: Option<usize>,
    /// weight-in-denominator or annealing.
    #[arg(long)]
    pub dynamic_variant: Option<String>,
    #[arg(long)]
    pub ascent_lr: Option<f64>,
    #[arg(long)]
    pub seq_dt: Option<f64>,
    /// Iterations times collocation points per stage.
    #[arg(long, visible_alias = "budget")]
    pub seq_budget: Option<f64>,
    #[arg(long)]
    pub seq_base_nr: Option<usize>,
    #[arg(long)]
    pub seq_incr: Option<usize>,
    /// Leave a stage early once the weighted loss is below this value.
    #[arg(long)]
    pub seq_threshold: Option<f64>,
    #[arg(long, default_value_t = 500)]
    pub metric_every: usize,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Scale (t, x) onto [-1, 1] before the first layer.
    #[arg(long)]
    pub normalize_inputs: bool,
    /// Skip the reference solve and all error metrics.
    #[arg(long)]
    pub no_metrics: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    /// Also write the training point sets as CSV.
    #[arg(long)]
    pub dump_samples: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    /// Network checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
    /// Concurrent runs; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// `a/b` or a decimal.
fn parse_step(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("not a number: {s:?}"))?,
    };
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("step must be positive: {s:?}"))
    }
}

fn exit_code(e: &StefanError) -> ExitCode {
    if e.is_numerical() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match config::config_path(&raw) {
        Some(path) => {
            let parsed = std::fs::read_to_string(&path)
                .map_err(StefanError::from)
                .and_then(|text| config::ConfigFile::parse(&text));
            match parsed {
                Ok(file) => config::splice(&raw, &SUBCOMMANDS, &file),
                Err(e) => {
                    eprintln!("error: config file {path}: {e}");
                    return ExitCode::from(2);
                }
            }
        }
        None => raw,
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
