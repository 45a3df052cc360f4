mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Retrieval-augmented long-text generation with dynamic passage selection.
#[derive(Debug, Parser)]
#[command(name = "dkgen", version)]
pub struct Cli {
    /// key = value file; command-line flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (default: 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index from a passage corpus (JSONL of {id, text}).
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus.jsonl and dataset.jsonl into a directory.
    Synth {
        /// Number of documents.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset and write vocab, checkpoints and a step log.
    Train(TrainArgs),
    /// Generate marked text for one query or a file of queries.
    Generate(GenerateArgs),
    /// Score generations against targets (one text per line each).
    Eval {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        /// Also write the full metric report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare iterative and single-pass latency over a query file.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Hidden size (default: 64).
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Encoder layers (default: 2).
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    /// Decoder layers (default: 2).
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// Attention heads (default: 4).
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward size (default: 256).
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Longest encodable sequence (default: 256).
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Training dropout (default: 0.1).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Generation loss weight against ranking plus distillation (default: 0.5).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Vocabulary size cap including special tokens (default: 10000).
    #[arg(long)]
    pub max_vocab: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset JSONL of {query, target, references:[{id, text, supports}]}.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus JSONL, used for the vocabulary and for global negatives.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Passes over the training tuples (default: 5).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps (default: unlimited).
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Tuples per optimizer step (default: 4).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// AdamW learning rate (default: 0.001).
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay (default: 0.01).
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gradient norm clip, 0 disables (default: 5).
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Drop the distillation loss (ablation w/o DI).
    #[arg(long)]
    pub no_di: bool,
    /// Sample negatives from the whole corpus instead of the document's references.
    #[arg(long)]
    pub global_negatives: bool,
}

#[derive(Debug, Args)]
pub struct EngineArgs {
    /// Passages retrieved per query (default: 20).
    #[arg(long)]
    pub k: Option<usize>,
    /// Keep the runner-up when its score exceeds this fraction of the top score (default: 0.8).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Longest sentence in tokens (default: 64).
    #[arg(long)]
    pub max_sentence_tokens: Option<usize>,
    /// Stop once this many distinct passages were used (default: 5).
    #[arg(long)]
    pub max_utilized: Option<usize>,
    /// Hard cap on sentences (default: 10).
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Beam width; 0 decodes greedily (default: 0).
    #[arg(long)]
    pub beam: Option<usize>,
    /// Feed the static top passages every iteration (ablation w/o DS).
    #[arg(long)]
    pub no_ds: bool,
    /// Leave previously generated text out of decoder memory (ablation w/o PG).
    #[arg(long)]
    pub no_pg: bool,
    /// Select passages by query relevance only (ablation w/o RP).
    #[arg(long)]
    pub no_rp: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Index written by `dkgen index`.
    #[arg(long)]
    pub index: PathBuf,
    /// Directory with model.ckpt and vocab.txt.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "query_file")]
    pub query: Option<String>,
    /// One query per line.
    #[arg(long)]
    pub query_file: Option<PathBuf>,
    /// Directory for one JSON trace per query.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// One query per line.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// Timed repetitions per query; the median is kept (default: 3).
    #[arg(long)]
    pub runs: Option<usize>,
    /// Passages in the single-pass memory (default: 5).
    #[arg(long)]
    pub passages: Option<usize>,
    /// Tokens decoded in single-pass mode (default: 256).
    #[arg(long)]
    pub tokens: Option<usize>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
