use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "realsamp",
    version,
    about = "Entropy-decay extrapolation and residual-entropy sampling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a decay curve to every profile of a record file.
    Fit(FitArgs),
    /// Decode a stream of logits with one of the samplers.
    Decode(DecodeArgs),
    /// Synthetic suites with known ground truth.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Diversity, regression and aggregation metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Hallucination-detection feature table and per-feature scores.
    Detect(DetectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Fp,
    Exp,
    Logistic,
}

impl From<KindArg> for realsamp_core::CurveKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Fp => Self::FractionalPolynomial,
            KindArg::Exp => Self::Exponential,
            KindArg::Logistic => Self::Logistic,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Output curve file (JSONL).
    #[arg(long, alias = "curves")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fp")]
    pub kind: KindArg,
    /// Highest inverse power of the fractional polynomial.
    #[arg(long = "K", default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Moving-average window over positions of a context (odd, 1 = off).
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Logit frames (JSONL): {"expert": [...], "amateur": [...]?, "context_id"?, "position"?}.
    #[arg(long)]
    pub logits: PathBuf,
    /// Curve file; required by the real* methods.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Record file whose header supplies the model family.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub method: String,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    /// REAL temperature.
    #[arg(long = "T")]
    pub real_t: Option<f64>,
    /// Softmax temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub typical_mass: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sentence-terminal token ids for the factual methods.
    #[arg(long, value_delimiter = ',')]
    pub terminals: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampled tokens (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Decision trace (JSONL).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Write a noiseless or noisy mixture-family record file plus ground truth.
    Generate(GenerateArgs),
    /// Compare fitted curves with ground truth.
    Score(ScoreArgs),
    /// Check the residual-entropy threshold bound on random separable cases.
    Theorem(TheoremArgs),
    /// Write a synthetic labeled detection suite (records + labels).
    Detection(DetectionArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub contexts: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0.6)]
    pub mix_rate: f64,
    #[arg(long, default_value_t = 15.0)]
    pub s_ref: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub curves: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
    /// Report file (JSON); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoremArgs {
    #[arg(long, default_value_t = 10_000)]
    pub cases: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 1.0, 2.0])]
    pub temps: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DetectionArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub spans: usize,
    #[arg(long, default_value_t = 6)]
    pub tokens_per_span: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Dist-n and repetition ratio of a generation corpus.
    Diversity(DiversityArgs),
    /// Predicted largest-model entropy (from curves) against measured.
    Regression(RegressionArgs),
    /// Max-min normalized factuality / diversity aggregates.
    Aggregate(AggregateArgs),
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    /// JSONL lines of {"prompt_id": ..., "tokens": [...]}.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub rep_n: usize,
}

#[derive(Debug, Args)]
pub struct RegressionArgs {
    #[arg(long)]
    pub curves: PathBuf,
    #[arg(long)]
    pub records: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// CSV or JSONL with columns method, model, prompt_type, metric, value.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Mean,
    FirstToken,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub curves: PathBuf,
    /// JSONL lines of {"context_id", "start", "end", "label"}.
    #[arg(long)]
    pub labels: PathBuf,
    /// Feature table (CSV).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "mean")]
    pub mode: ModeArg,
    /// Also report pick-the-factual accuracy over consecutive groups of this size.
    #[arg(long)]
    pub group_size: Option<usize>,
}
