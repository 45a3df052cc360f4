//! Miniature transformer encoder-decoder with a passage scoring head.
//!
//! Every input sequence is encoded separately (positions restart at zero),
//! the decoder cross-attends over the row-concatenation of the encoded
//! sequences, and the scoring head maps an EOS-pooled state to a raw
//! relevance score.

mod attention;
mod checkpoint;
mod config;
mod graph;
mod inference;

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;

pub use attention::{extract_passage_attention, CrossAttentionRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use graph::{DecoderVars, EncodedVars, Graph};
pub use inference::{Decoded, DecoderState};

use crate::numerics::{NumericsError, ParamStore, RngState, Tape, Tensor, Var};
use crate::tokenizer::{EOS, PAD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("hidden dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("attention record holds no decoded steps")]
    NoDecodedSteps,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Hidden states of one separately encoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    /// `[len × d]`
    pub hidden: Tensor,
    /// Hidden state at the EOS position.
    pub pooled: Vec<f64>,
    /// `false` at padded positions.
    pub keep: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Segment boundaries inside the concatenated decoder memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    /// `offsets[i]..offsets[i + 1]` is segment `i`; the last entry is the memory length.
    pub offsets: Vec<usize>,
    /// Whether segment 0 is the previously generated context.
    pub has_context: bool,
}

impl SegmentLayout {
    pub fn memory_len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    /// Ranges of the reference-passage segments, context excluded.
    pub fn passage_ranges(&self) -> Vec<Range<usize>> {
        let skip = usize::from(self.has_context);
        self.offsets
            .windows(2)
            .skip(skip)
            .map(|w| w[0]..w[1])
            .collect()
    }

    pub fn context_range(&self) -> Option<Range<usize>> {
        self.has_context.then(|| self.offsets[0]..self.offsets[1])
    }
}

/// Decoder memory: context first (when present), then passages in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    /// `[memory_len × d]`
    pub states: Tensor,
    pub keep: Vec<bool>,
    pub layout: SegmentLayout,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

/// Concatenates encoded sequences row-wise into decoder memory.
pub fn concat_memory(context: Option<&EncodedSequence>, passages: &[&EncodedSequence]) -> Result<Memory> {
    let parts: Vec<&EncodedSequence> = context.into_iter().chain(passages.iter().copied()).collect();
    let d = match parts.first() {
        Some(p) => p.hidden.dims2()?.1,
        None => 0,
    };
    let mut data = Vec::new();
    let mut keep = Vec::new();
    let mut offsets = vec![0];
    for p in &parts {
        let (len, pd) = p.hidden.dims2()?;
        if pd != d {
            return Err(ModelError::DimMismatch { expected: d, got: pd });
        }
        data.extend_from_slice(p.hidden.data());
        keep.extend_from_slice(&p.keep);
        offsets.push(offsets.last().unwrap() + len);
    }
    let rows = keep.len();
    Ok(Memory {
        states: Tensor::new(vec![rows, d], data)?,
        keep,
        layout: SegmentLayout {
            offsets,
            has_context: context.is_some(),
        },
    })
}

/// Parameter names mapped to tape variables for one forward pass.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Parameter names of the scoring head.
pub const SCORE_HEAD_PARAMS: [&str; 4] = ["score.w1", "score.b1", "score.w2", "score.b2"];

/// The encoder-decoder and its scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    params: ParamStore,
}

impl Seq2Seq {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in Self::expected_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".g") {
                vec![1.0; n]
            } else if name == "tok_emb" {
                (0..n).map(|_| rng.normal()).collect()
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * limit).collect()
            } else {
                vec![0.0; n]
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .map_err(|_| ModelError::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Every parameter name with its shape, in name order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let attn = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            for w in ["q", "k", "v", "o"] {
                push(format!("{prefix}.w{w}"), vec![d, d]);
                push(format!("{prefix}.b{w}"), vec![d]);
            }
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            push(format!("{prefix}.g"), vec![d]);
            push(format!("{prefix}.b"), vec![d]);
        };
        let ffn = |push: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            push(format!("{prefix}.w1"), vec![d, f]);
            push(format!("{prefix}.b1"), vec![f]);
            push(format!("{prefix}.w2"), vec![f, d]);
            push(format!("{prefix}.b2"), vec![d]);
        };
        push("tok_emb".into(), vec![cfg.vocab_size, d]);
        for l in 0..cfg.encoder_layers {
            norm(&mut push, &format!("enc.{l}.ln1"));
            attn(&mut push, &format!("enc.{l}.attn"));
            norm(&mut push, &format!("enc.{l}.ln2"));
            ffn(&mut push, &format!("enc.{l}.ffn"));
        }
        norm(&mut push, "enc.ln_f");
        for l in 0..cfg.decoder_layers {
            norm(&mut push, &format!("dec.{l}.ln1"));
            attn(&mut push, &format!("dec.{l}.self"));
            norm(&mut push, &format!("dec.{l}.ln2"));
            attn(&mut push, &format!("dec.{l}.cross"));
            norm(&mut push, &format!("dec.{l}.ln3"));
            ffn(&mut push, &format!("dec.{l}.ffn"));
        }
        norm(&mut push, "dec.ln_f");
        push("lm_head.w".into(), vec![d, cfg.vocab_size]);
        push("lm_head.b".into(), vec![cfg.vocab_size]);
        push("score.w1".into(), vec![d, d]);
        push("score.b1".into(), vec![d]);
        push("score.w2".into(), vec![d, 1]);
        push("score.b2".into(), vec![1]);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn weight(&self, name: &str) -> &[f64] {
        self.params
            .get(name)
            .unwrap_or_else(|_| panic!("parameter `{name}` missing"))
            .data()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.to_string(), tape.leaf(p.value.clone(), requires_grad)))
            .collect();
        Bindings { vars }
    }

    /// Adds tape gradients of bound parameters into the parameter store.
    /// Parameters the loss did not reach receive an explicit zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bindings: &Bindings) -> Result<()> {
        for (name, var) in bindings.iter() {
            match tape.grad(var) {
                Some(g) => self.params.accumulate_grad(name, g.data())?,
                None => {
                    let n = tape.value(var).numel();
                    self.params.accumulate_grad(name, &vec![0.0; n])?;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Bidirectional encoding; the pooled state is read at the last EOS.
    pub fn encode(&self, ids: &[usize]) -> Result<EncodedSequence> {
        let mut tape = Tape::new();
        let bindings = self.bind(&mut tape, false);
        let mut graph = Graph::new(&mut tape, &bindings, &self.config, None);
        let enc = graph.encode(ids)?;
        Ok(EncodedSequence {
            hidden: tape.value(enc.hidden).clone(),
            pooled: tape.value(enc.pooled).data().to_vec(),
            keep: enc.keep,
        })
    }

    /// Raw relevance score of a pooled state.
    pub fn score(&self, pooled: &[f64]) -> Result<f64> {
        let d = self.config.hidden_dim;
        if pooled.len() != d {
            return Err(ModelError::DimMismatch {
                expected: d,
                got: pooled.len(),
            });
        }
        let mut h = crate::numerics::kernels::vec_mat(pooled, self.weight("score.w1"), Some(self.weight("score.b1")), d);
        h.iter_mut().for_each(|v| *v = crate::numerics::kernels::gelu(*v));
        Ok(crate::numerics::kernels::vec_mat(&h, self.weight("score.w2"), Some(self.weight("score.b2")), 1)[0])
    }

    /// Next-token logits after `prefix`, plus the cross-attention of every prefix position.
    pub fn decode_step(&self, prefix: &[usize], memory: &Memory) -> Result<(Vec<f64>, CrossAttentionRecord)> {
        self.check_ids(prefix)?;
        let mut state = DecoderState::new(self, memory)?;
        let mut logits = Vec::new();
        for &tok in prefix {
            logits = state.step(tok)?;
        }
        Ok((logits, state.into_record()))
    }
}

/// Position of the last EOS before padding, or the last unpadded position.
pub(crate) fn pool_position(ids: &[usize]) -> usize {
    let unpadded = ids.iter().rposition(|&t| t != PAD).unwrap_or(0);
    ids[..=unpadded]
        .iter()
        .rposition(|&t| t == EOS)
        .unwrap_or(unpadded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(len: usize, d: usize) -> EncodedSequence {
        EncodedSequence {
            hidden: Tensor::new(vec![len, d], (0..len * d).map(|v| v as f64).collect()).unwrap(),
            pooled: vec![0.0; d],
            keep: vec![true; len],
        }
    }

    #[test]
    fn memory_offsets() {
        let ctx = seq(3, 2);
        let (a, b) = (seq(4, 2), seq(5, 2));
        let m = concat_memory(Some(&ctx), &[&a, &b]).unwrap();
        assert_eq!(m.len(), 12);
        assert_eq!(m.layout.offsets, vec![0, 3, 7, 12]);
        assert_eq!(m.layout.passage_ranges(), vec![3..7, 7..12]);
        let alone = concat_memory(Some(&ctx), &[]).unwrap();
        assert_eq!(alone.states, ctx.hidden);
        let no_ctx = concat_memory(None, &[&a, &b]).unwrap();
        assert_eq!(no_ctx.layout.offsets, vec![0, 4, 9]);
        assert_eq!(no_ctx.layout.context_range(), None);
    }

    #[test]
    fn memory_permutes_with_passages() {
        let ctx = seq(2, 2);
        let a = seq(3, 2);
        let mut b = seq(2, 2);
        b.hidden.data_mut().iter_mut().for_each(|v| *v = -*v);
        let ab = concat_memory(Some(&ctx), &[&a, &b]).unwrap();
        let ba = concat_memory(Some(&ctx), &[&b, &a]).unwrap();
        assert_eq!(&ab.states.data()[4..10], &ba.states.data()[8..14]);
        assert_eq!(&ab.states.data()[10..14], &ba.states.data()[4..8]);
    }

    #[test]
    fn memory_dim_mismatch() {
        let a = seq(2, 2);
        let b = seq(2, 3);
        assert!(matches!(
            concat_memory(None, &[&a, &b]),
            Err(ModelError::DimMismatch { .. })
        ));
    }

    #[test]
    fn pooling_position() {
        assert_eq!(pool_position(&[4, 9, 2]), 2);
        assert_eq!(pool_position(&[4, 9, 2, 0, 0]), 2);
        assert_eq!(pool_position(&[4, 9, 8]), 2);
    }
}
