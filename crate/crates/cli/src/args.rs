use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use streamcrf::{Backend, CenteringMode};

#[derive(Debug, Parser)]
#[command(
    name = "streamcrf",
    version,
    about = "Semi-Markov CRF inference, validation and benchmarking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Report file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Worker threads for batch parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward and backward wall time and tracked working bytes over a size grid.
    Bench(BenchArgs),
    /// Central finite differences against the analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Streaming, dense, fast-path and exhaustive-enumeration equivalence.
    Oracle(OracleArgs),
    /// Synthetic training run comparing loss curves across backends.
    TrainDemo(TrainArgs),
    /// Decoded label counts and cumulative-score growth per centering mode.
    AblateCentering(AblateArgs),
    /// Bandwidth of duration-compatibility patterns under identity and RCM orderings.
    Bandwidth(BandwidthArgs),
    /// Viterbi decoding and optional posterior marginals for given inputs.
    Decode(DecodeArgs),
    /// Posterior invariants on a seeded random instance.
    Selfcheck(SelfcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Bench(_) => "bench",
            Self::Gradcheck(_) => "gradcheck",
            Self::Oracle(_) => "oracle",
            Self::TrainDemo(_) => "train-demo",
            Self::AblateCentering(_) => "ablate-centering",
            Self::Bandwidth(_) => "bandwidth",
            Self::Decode(_) => "decode",
            Self::Selfcheck(_) => "selfcheck",
        }
    }
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: streamcrf::Error| e.to_string())
}

fn parse_centering(s: &str) -> Result<CenteringMode, String> {
    s.parse().map_err(|e: streamcrf::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long = "T", value_delimiter = ',', default_values_t = [1000usize, 10000])]
    pub t: Vec<usize>,
    #[arg(long = "K", value_delimiter = ',', default_values_t = [8usize])]
    pub k: Vec<usize>,
    #[arg(long = "C", value_delimiter = ',', default_values_t = [5usize])]
    pub c: Vec<usize>,
    #[arg(long = "B", default_value_t = 1)]
    pub b: usize,
    /// dense, streaming or auto; repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',', value_parser = parse_backend, default_value = "streaming")]
    pub backend: Vec<Backend>,
    /// Timed runs per configuration after one warmup.
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Checkpoint interval override.
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long = "T", default_value_t = 100)]
    pub t: usize,
    #[arg(long = "K", default_value_t = 25)]
    pub k: usize,
    #[arg(long = "C", default_value_t = 16)]
    pub c: usize,
    #[arg(long = "B", default_value_t = 1)]
    pub b: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    #[arg(long, value_parser = parse_backend, default_value = "streaming")]
    pub backend: Backend,
    /// Include per-position boundary projections and scalar start/end scores.
    #[arg(long)]
    pub projections: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    /// Upper bound on sampled sequence length.
    #[arg(long = "T", default_value_t = 6)]
    pub t: usize,
    #[arg(long = "K", default_value_t = 3)]
    pub k: usize,
    #[arg(long = "C", default_value_t = 3)]
    pub c: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub logz_tol: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub grad_tol: f64,
    /// Skip gradient comparisons.
    #[arg(long)]
    pub no_gradients: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long = "T", default_value_t = 200)]
    pub t: usize,
    #[arg(long = "K", default_value_t = 20)]
    pub k: usize,
    #[arg(long = "C", default_value_t = 8)]
    pub c: usize,
    #[arg(long = "B", default_value_t = 4)]
    pub b: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_backend, default_value = "dense,streaming")]
    pub backend: Vec<Backend>,
    #[arg(long, value_parser = parse_centering, default_value = "mean")]
    pub centering: CenteringMode,
    /// Largest tolerated relative difference of final losses.
    #[arg(long, default_value_t = 1e-9)]
    pub final_tol: f64,
    /// Smallest tolerated loss-curve cosine.
    #[arg(long, default_value_t = 0.999999)]
    pub min_cosine: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long = "T", default_value_t = 2000)]
    pub t: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.75, 0.15, 0.10])]
    pub proportions: Vec<f64>,
    /// Emission score of the gold label.
    #[arg(long, default_value_t = 0.5)]
    pub gain: f64,
    /// Length of the cumulative-growth probe; 0 skips it.
    #[arg(long, default_value_t = 50_000)]
    pub growth_t: usize,
    /// Emission mean of the growth probe.
    #[arg(long, default_value_t = 2.0)]
    pub growth_mean: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BandwidthArgs {
    #[arg(long = "K", value_delimiter = ',', default_values_t = [4usize, 5, 6, 7, 8])]
    pub k: Vec<usize>,
    #[arg(long = "C", value_delimiter = ',', default_values_t = [2usize, 3, 4])]
    pub c: Vec<usize>,
    /// Largest span; defaults to 2K + 2 per K.
    #[arg(long)]
    pub max_span: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Parameter JSON file.
    #[arg(long)]
    pub params: PathBuf,
    /// Emissions as CSV (b,t,c0..) or JSON.
    #[arg(long)]
    pub emissions: PathBuf,
    /// Write posterior marginals here as JSON.
    #[arg(long)]
    pub marginals: Option<PathBuf>,
    #[arg(long, value_parser = parse_centering, default_value = "mean")]
    pub centering: CenteringMode,
    #[arg(long, value_parser = parse_backend, default_value = "auto")]
    pub backend: Backend,
    #[arg(long)]
    pub delta: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long = "T", default_value_t = 2000)]
    pub t: usize,
    #[arg(long = "K", default_value_t = 50)]
    pub k: usize,
    #[arg(long = "C", default_value_t = 32)]
    pub c: usize,
    #[arg(long = "B", default_value_t = 4)]
    pub b: usize,
    /// Draw shorter lengths after the first sequence.
    #[arg(long)]
    pub ragged: bool,
    #[arg(long, value_parser = parse_backend, default_value = "auto")]
    pub backend: Backend,
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    pub normalization_tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub mass_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
