use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Segment-aware sign video tokenization, contrastive pretraining and
/// translation on feature streams.
///
/// Exit codes: 0 ok, 2 usage, 3 data error, 4 numerical-check failure.
#[derive(Debug, Parser)]
#[command(name = "signtok", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a seeded synthetic corpus.
    GenerateSynth(GenerateArgs),
    /// Segment every video of a corpus and report the reduction ratio.
    Segment(SegmentArgs),
    /// Stage 1: contrastive pretraining.
    Pretrain(PretrainArgs),
    /// Stage 2: translation fine-tuning.
    Train(TrainArgs),
    /// Decode a corpus with a fine-tuned checkpoint.
    Translate(TranslateArgs),
    /// Score hypothesis lines against reference lines.
    Evaluate(EvaluateArgs),
    /// Finite-difference check of a loss gradient.
    Gradcheck(GradcheckArgs),
    /// Attention memory sweep over sequence lengths.
    BenchMemory(BenchMemoryArgs),
    /// Per-video token/gloss similarity CSVs from a pretraining checkpoint.
    ExportSimilarity(ExportArgs),
    /// One full pretrain + finetune + test run per axis value.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub seed: u64,
    /// Total videos; defaults to the sum of --split.
    #[arg(long)]
    pub videos: Option<usize>,
    /// Write train/, val/ and test/ subdirectories with these counts.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<usize>>,
    /// JSON file with SyntheticSpec fields; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub signs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[value(alias = "energy")]
    MotionEnergy,
    Uniform,
    Oracle,
}

#[derive(Debug, Args, Serialize)]
pub struct SegmentArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "motion-energy")]
    pub method: Method,
    #[arg(long, default_value_t = 3)]
    pub smooth_window: usize,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    /// Boundary tolerance in frames when ground truth is present.
    #[arg(long, default_value_t = 2)]
    pub tol: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    /// Published widths.
    Full,
    /// Narrow single-layer stacks for CPU runs.
    Desk,
}

/// Run-config sources. Precedence: defaults, then `--config`, then flags.
#[derive(Debug, Args, Serialize)]
pub struct BaseConfig {
    /// JSON file with RunConfig fields (partial objects are merged).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchPreset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
}

/// Stage-specific optimizer flags.
#[derive(Debug, Args, Serialize)]
pub struct CommonTrain {
    #[command(flatten)]
    pub base: BaseConfig,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub common: CommonTrain,
    /// clcl or clip.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub dual: Option<bool>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Continue from a pretraining checkpoint; its config is the base.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Validation corpus for periodic greedy decoding.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Pretraining checkpoint; its config and vocabulary are the base.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonTrain,
    /// none, vle or vle_plus_te.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long)]
    pub validate_every: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// Continue an interrupted run in this run directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Beam width; 1 is greedy. Defaults to the checkpoint's config.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// One hypothesis sentence per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// One reference sentence per line.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// ce, hs, clcl, clip or lm.
    #[arg(long)]
    pub loss: String,
    #[arg(long, default_value_t = 3)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchMemoryArgs {
    #[arg(long, value_delimiter = ',', default_value = "32,64,96,128,192,256")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Analytic counts only.
    #[arg(long)]
    pub no_measure: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Directory with train/, val/ and test/ corpora.
    #[arg(long)]
    pub data: PathBuf,
    /// `beta=0,0.2`, `loss=clcl+dual,clcl,clip` or `policy=none,vle`.
    #[arg(long)]
    pub axis: String,
    #[command(flatten)]
    pub base: BaseConfig,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}
