//! Training loop, iterative generation and latency measurement.

mod backend;
mod generate;
mod latency;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{DecodedSentence, GenerationModel, TextModel};
pub use generate::{generate, GenerationTrace, IterationRecord, RetrievedPassage, StopReason};
pub use latency::{measure_latency, single_pass, LatencyMode, LatencyReport};
pub use train::{evaluate_sample, sample_gradients, sample_total_frozen, train, SampleGradients, training_memory_layout, StepRecord, TrainConfig, TrainReport};

use crate::data::DataError;
use crate::losses::LossError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::retriever::RetrieverError;
use crate::selection::SelectionError;
use crate::tokenizer::TokenizerError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error("retrieval returned no passages for query `{0}`")]
    NoPassages(String),
    #[error("no training samples")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
}

/// Which parts of the method are switched off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Static top passages every iteration instead of dynamic selection.
    pub no_ds: bool,
    /// No previously generated text in decoder memory.
    pub no_pg: bool,
    /// Selection ignores the previously generated text.
    pub no_rp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Passages retrieved once per query.
    pub k: usize,
    pub gamma: f64,
    pub max_sentence_tokens: usize,
    pub max_utilized: usize,
    pub max_iterations: usize,
    pub decode: DecodeStrategy,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: 20,
            gamma: 0.8,
            max_sentence_tokens: 64,
            max_utilized: 5,
            max_iterations: 10,
            decode: DecodeStrategy::Greedy,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("max_sentence_tokens", self.max_sentence_tokens),
            ("max_utilized", self.max_utilized),
            ("max_iterations", self.max_iterations),
        ] {
            if v == 0 {
                return Err(EngineError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EngineError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if let DecodeStrategy::Beam { width: 0 } = self.decode {
            return Err(EngineError::Config("beam width must be at least 1".into()));
        }
        Ok(())
    }
}
