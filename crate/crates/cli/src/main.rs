mod commands;

use std::io::IsTerminal;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use cadret_core::trainer::Dataset;
use cadret_core::{Ablation, FusionStrategy, ModelConfig, Split};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Text-to-CAD retrieval: ingest a corpus, train, evaluate, index and serve.
///
/// Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
#[derive(Debug, Parser)]
#[command(name = "cadret", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a manifest and write a normalized copy (fixed-size point clouds).
    Ingest(IngestArgs),
    /// Write a synthetic manifest with raw point files.
    Synth(SynthArgs),
    /// Train a retrieval model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write a metric report.
    Eval(EvalArgs),
    /// Embed CAD models and write a gallery index directory.
    Index(IndexArgs),
    /// Run one text query against an index; prints JSON on stdout.
    Query(QueryArgs),
    /// Write an N x N text-to-CAD similarity matrix as CSV plus an id legend.
    ExportHeatmap(HeatmapArgs),
    /// Serve the HTTP query API.
    Serve(ServeArgs),
    /// Train and evaluate the four component settings and print the table.
    Ablation(AblationArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// D = 256, 4/5/8 layers, 1024 points.
    Full,
    /// D = 32, 1/1/2 layers, 64 points.
    Desk,
    /// D = 8, 6 tokens, 16 points.
    Micro,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::full(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
        }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Newline-delimited JSON manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the normalized manifest, point files and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Points sampled per CAD model.
    #[arg(long, default_value_t = 1024)]
    pub points_per_model: usize,
    /// Maximum CAD sequence length.
    #[arg(long, default_value_t = 272)]
    pub max_seq_len: usize,
    /// Seed for point subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep only records with this annotation level.
    #[arg(long)]
    pub level: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (manifest.jsonl plus points/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub train: usize,
    #[arg(long, default_value_t = 16)]
    pub val: usize,
    #[arg(long, default_value_t = 32)]
    pub test: usize,
    /// Points per model after ingestion; raw files hold twice as many.
    #[arg(long, default_value_t = 1024)]
    pub points_per_model: usize,
    #[arg(long, default_value_t = 272)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory: best.ckpt, last.ckpt, history.json, train_log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Sets the default mask ratio (0.5 for text2cad, 0.0 for cadtranslator).
    #[arg(long, default_value = "text2cad")]
    pub dataset: Dataset,
    /// Fraction of valid sequence positions masked for reconstruction.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Weight of the reconstruction loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Seed for initialization, shuffling, masking and point sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Components: s, p, sp or sp+dec.
    #[arg(long, default_value = "sp+dec")]
    pub ablation: Ablation,
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// concat, concat_linear, concat_selfattn, crossattn or modulation.
    #[arg(long, default_value = "concat")]
    pub fusion: FusionStrategy,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    /// Disable gradient clipping.
    #[arg(long)]
    pub no_clip: bool,
    /// Validate every this many epochs.
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Split used to pick the best checkpoint.
    #[arg(long, default_value = "val")]
    pub select_on: Split,
    /// Continue from a checkpoint (model flags are taken from it).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep only records with this annotation level.
    #[arg(long)]
    pub level: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Where to write the MetricReport JSON.
    #[arg(long)]
    pub report: PathBuf,
    /// Seed for point subsampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub level: Option<String>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Index directory to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Index only this split (all records when omitted).
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index directory written by `index`.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value_t = 10, allow_negative_numbers = true)]
    pub k: i64,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Number of query/model pairs.
    #[arg(long, default_value_t = 25)]
    pub n: usize,
    /// Seed for pair selection (and for the untrained model and synthetic corpus when no checkpoint is given).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; the legend goes next to it as `<name>.legend.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Trained checkpoint. Without it a seeded, untrained desk model is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus to draw pairs from. Without it a synthetic corpus is generated.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CADRET_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "CADRET_INDEX")]
    pub index: PathBuf,
    #[arg(long, env = "CADRET_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Print the published full-corpus table and check its ordering instead of training.
    #[arg(long)]
    pub full_scale: bool,
    /// Corpus to train on. Without it a synthetic corpus is generated.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also write the table as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let cause = cause.to_string();
                if !msg.contains(&cause) {
                    msg = format!("{msg}: {cause}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
