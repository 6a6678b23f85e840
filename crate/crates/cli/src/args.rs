//! Command-line surface. Every setting is optional here so that the config
//! file and the built-in defaults can fill it in.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cmcm", version, about = "Coherence-aware text-to-image retrieval")]
pub struct Cli {
    /// JSON config file; flags override it, it overrides defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus, split it, build the vocabulary and word vectors.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Repeated pool evaluation of one or more checkpoints.
    Eval(EvalArgs),
    /// Retrain across values of one hyperparameter and score on validation.
    Sweep(SweepArgs),
    /// Per-relation retrieval tables and positive rates.
    ReportRelations(ReportArgs),
    /// Ground truth, top-k of two models and attention weights per query.
    DumpTopk(DumpTopkArgs),
    /// Build pairwise comparison tasks from two models' top-1 retrievals.
    HumanevalMake(HumanevalMakeArgs),
    /// Serve tasks to raters and collect votes.
    HumanevalServe(HumanevalServeArgs),
    /// Majority-vote aggregation and significance.
    HumanevalAggregate(HumanevalAggregateArgs),
    /// Write shared-space embeddings of a split.
    ExportEmbeddings(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::ReportRelations(_) => "report-relations",
            Command::DumpTopk(_) => "dump-topk",
            Command::HumanevalMake(_) => "humaneval-make",
            Command::HumanevalServe(_) => "humaneval-serve",
            Command::HumanevalAggregate(_) => "humaneval-aggregate",
            Command::ExportEmbeddings(_) => "export-embeddings",
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus in JSON Lines; relative paths resolve under CMCM_DATA_ROOT.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// cite, clue or synthetic.
    #[arg(long)]
    pub schema: Option<String>,
    /// Output data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub word_dim: Option<usize>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub w2v_epochs: Option<usize>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub relations: Option<usize>,
    /// Signal strength in [0, 1].
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_dim: Option<usize>,
    /// Output corpus path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model and optimizer settings shared by `train` and `sweep`.
#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Data directory written by `ingest`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// base, cmca, cmcm, cmcm-noattn or cmcm-single:<relation>.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub shared_dim: Option<usize>,
    #[arg(long)]
    pub rnn_hidden: Option<usize>,
    /// pixel-pool, pretrained-cnn or toy-mlp.
    #[arg(long)]
    pub backbone: Option<String>,
    /// bilstm-1-layer, bigru-1-layer or toy-mean-pool.
    #[arg(long)]
    pub text_rnn: Option<String>,
    /// concat or product.
    #[arg(long)]
    pub head_input: Option<String>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub val_pool: Option<usize>,
    /// Also update word vectors.
    #[arg(long)]
    pub fine_tune: bool,
    /// Stop head gradients at the shared embeddings.
    #[arg(long)]
    pub detach_head: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint directory for the best epoch.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Pool evaluation settings.
#[derive(Debug, Args, Default)]
pub struct PoolArgs {
    /// Split to evaluate: test or val.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Selectively refine similarities with the coherence head.
    #[arg(long)]
    pub refine: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory; repeat to compare variants.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub pool: PoolArgs,
    /// Report path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// lambda-cls or max-seq-len.
    #[arg(long)]
    pub param: Option<String>,
    /// Comma-separated values.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// CSV output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub pool: PoolArgs,
    /// Markdown output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpTopkArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint of the coherence-aware model.
    #[arg(long)]
    pub cmcm: Option<PathBuf>,
    /// Checkpoint of the coherence-agnostic model.
    #[arg(long)]
    pub cmca: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of queries to list.
    #[arg(long)]
    pub queries: Option<usize>,
    #[command(flatten)]
    pub pool: PoolArgs,
    /// JSON Lines output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HumanevalMakeArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub cmcm: Option<PathBuf>,
    #[arg(long)]
    pub cmca: Option<PathBuf>,
    /// Keep only queries positive for this relation.
    #[arg(long)]
    pub relation: Option<String>,
    /// Keep at most this many tasks.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub pool: PoolArgs,
    /// Task store path (JSON Lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HumanevalServeArgs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub votes: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub raters_per_item: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HumanevalAggregateArgs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub votes: Option<PathBuf>,
    #[arg(long)]
    pub raters_per_item: Option<usize>,
    /// Result path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Write raw instead of L2-normalized embeddings.
    #[arg(long)]
    pub raw: bool,
    /// Output prefix; `<prefix>_text.*` and `<prefix>_image.*` are written.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
