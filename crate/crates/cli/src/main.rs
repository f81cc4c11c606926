mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use arma_core::data::synthetic::SyntheticKind;
use arma_core::ma_analysis::PhiQ;
use arma_core::AttnKind;

/// ARMA attention forecaster: training, evaluation and analysis tools.
///
/// Logging goes to stderr and is controlled by ARMA_ATTN_LOG
/// (error, info or debug; default info).
#[derive(Parser, Debug)]
#[command(name = "arma-attn", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration (JSON). Unset sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for init, data, dropout and shuffling [default: train.seed, 2024]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks one per core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Directory for output files [default: output_dir from the config, else "out"]
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoint.json and metrics.json.
    Train(TrainArgs),
    /// Score a checkpoint on the test split; writes eval_metrics.json.
    Eval(EvalArgs),
    /// Build MA weight maps B and Theta from random projections; writes CSV/JSON files.
    AnalyzeMa(AnalyzeArgs),
    /// Finite-difference gradient checks of every attention variant.
    Gradcheck(GradcheckArgs),
    /// AR vs ARMA parameter counts per attention variant.
    Paramcount(ParamcountArgs),
    /// Write a synthetic series as CSV.
    GenData(GenDataArgs),
    /// Compare recurrent and parallel kernels: max error and timing.
    BenchEquivalence(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// CSV data file; replaces data.source and data.synthetic
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Attention variant [default: linear]
    #[arg(long)]
    pub kind: Option<AttnKind>,
    /// Enable the MA term [default: true]
    #[arg(long)]
    pub ma: Option<bool>,
    /// Maximum epochs [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Windows per micro-batch [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Micro-batches per optimiser step [default: 1]
    #[arg(long)]
    pub grad_accum_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV data file; replaces data.source and data.synthetic
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Sequence length N
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Feature width d
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Heads; with more than one, a head-averaged map is written too
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    /// Key activation scale alpha
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Negative slope of leaky-relu query activations
    #[arg(long, default_value_t = 0.02)]
    pub slope: f64,
    /// Query activation
    #[arg(long, default_value = "neg-leaky-relu")]
    pub phi_q: PhiQ,
    /// Extra alpha values to sweep, comma separated (e.g. 0.01,0.1,1)
    #[arg(long, value_delimiter = ',')]
    pub alpha_sweep: Vec<f64>,
    /// Run every registered query activation
    #[arg(long)]
    pub registry: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {}

#[derive(Args, Debug)]
pub struct ParamcountArgs {
    /// Channel count C used to size d [default: from data.synthetic, else 7]
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Series family
    #[arg(long, default_value = "seasonal")]
    pub kind: SyntheticKind,
    /// Rows
    #[arg(long, default_value_t = 8000)]
    pub length: usize,
    /// Channels
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Noise std of the seasonal families
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Output file [default: <output-dir>/<kind>.csv]
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Sequence length N
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Feature width d
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Heads (element-wise and fixed override this)
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Timed repetitions per kernel
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ARMA_ATTN_LOG", "info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
