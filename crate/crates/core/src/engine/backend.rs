use std::path::Path;

use super::{DecodeStrategy, EngineError, Result};
use crate::model::{load_checkpoint, save_checkpoint, CrossAttentionRecord, EncodedSequence, Memory, Seq2Seq};
use crate::tokenizer::Vocabulary;

/// A decoded sentence and the attention captured while decoding it.
#[derive(Debug, Clone)]
pub struct DecodedSentence {
    pub text: String,
    pub record: Option<CrossAttentionRecord>,
}

/// What the generation procedure needs from a model.
pub trait GenerationModel {
    fn hidden_dim(&self) -> usize;
    /// Encodes `[query] q [ref] p [EOS]`.
    fn encode_passage(&self, query: &str, passage: &str) -> Result<EncodedSequence>;
    /// Encodes `[context] T [EOS]`.
    fn encode_context(&self, context: &str) -> Result<EncodedSequence>;
    /// Raw relevance of a pooled passage state.
    fn query_score(&self, pooled: &[f64]) -> Result<f64>;
    fn decode_sentence(&self, memory: &Memory, strategy: DecodeStrategy, max_tokens: usize) -> Result<DecodedSentence>;
}

/// A vocabulary paired with the encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextModel {
    pub vocab: Vocabulary,
    pub model: Seq2Seq,
}

impl TextModel {
    pub fn new(vocab: Vocabulary, model: Seq2Seq) -> Result<Self> {
        if vocab.len() != model.config().vocab_size {
            return Err(EngineError::Config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        Ok(Self { vocab, model })
    }

    pub fn max_len(&self) -> usize {
        self.model.config().max_positions
    }

    pub fn passage_ids(&self, query: &str, passage: &str) -> Result<Vec<usize>> {
        Ok(self.vocab.format_passage(query, passage, self.max_len())?)
    }

    pub fn context_ids(&self, context: &str) -> Result<Vec<usize>> {
        Ok(self.vocab.format_context(context, self.max_len())?)
    }

    /// Sentence ids, truncated so that BOS plus the sentence fits the decoder.
    pub fn sentence_ids(&self, sentence: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(sentence);
        ids.truncate(self.max_len() - 1);
        ids
    }

    /// Writes `model.ckpt` and `vocab.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| EngineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        save_checkpoint(&self.model, &dir.join("model.ckpt"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = load_checkpoint(&dir.join("model.ckpt"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        Self::new(vocab, model)
    }
}

impl GenerationModel for TextModel {
    fn hidden_dim(&self) -> usize {
        self.model.config().hidden_dim
    }

    fn encode_passage(&self, query: &str, passage: &str) -> Result<EncodedSequence> {
        Ok(self.model.encode(&self.passage_ids(query, passage)?)?)
    }

    fn encode_context(&self, context: &str) -> Result<EncodedSequence> {
        Ok(self.model.encode(&self.context_ids(context)?)?)
    }

    fn query_score(&self, pooled: &[f64]) -> Result<f64> {
        Ok(self.model.score(pooled)?)
    }

    fn decode_sentence(&self, memory: &Memory, strategy: DecodeStrategy, max_tokens: usize) -> Result<DecodedSentence> {
        let decoded = match strategy {
            DecodeStrategy::Greedy => self.model.greedy(memory, max_tokens, false)?,
            DecodeStrategy::Beam { width } => self.model.beam_search(memory, width, max_tokens)?,
        };
        Ok(DecodedSentence {
            text: self.vocab.decode(&decoded.tokens)?,
            record: Some(decoded.record),
        })
    }
}
