//! Differentiable forward pass recorded on a [`Tape`].

use super::{pool_position, Bindings, ModelConfig, ModelError, Result, SegmentLayout};
use crate::numerics::kernels::sinusoid;
use crate::numerics::{RngState, Tape, Tensor, Var};
use crate::tokenizer::PAD;

/// Tape handles for one encoded sequence.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    /// `[len × d]`
    pub hidden: Var,
    /// `[1 × d]`
    pub pooled: Var,
    pub keep: Vec<bool>,
}

/// Tape handles for a teacher-forced decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderVars {
    /// `[steps × vocab]`
    pub logits: Var,
    /// Cross-attention probabilities `[layer][head]`, each `[steps × memory]`.
    pub cross_attention: Vec<Vec<Var>>,
}

/// Builds model computations on a tape. Dropout is active iff an rng is given.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    bindings: &'a Bindings,
    cfg: &'a ModelConfig,
    rng: Option<&'a mut RngState>,
}

impl<'a> Graph<'a> {
    pub fn new(
        tape: &'a mut Tape,
        bindings: &'a Bindings,
        cfg: &'a ModelConfig,
        rng: Option<&'a mut RngState>,
    ) -> Self {
        Self {
            tape,
            bindings,
            cfg,
            rng,
        }
    }

    fn p(&self, name: &str) -> Var {
        self.bindings.get(name)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.cfg.max_positions {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.cfg.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.cfg.dropout;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < p { 0.0 } else { scale })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        Ok(self.tape.mul(x, m)?)
    }

    fn embed(&mut self, ids: &[usize]) -> Result<Var> {
        let d = self.cfg.hidden_dim;
        let tok = self.tape.embedding(self.p("tok_emb"), ids)?;
        let pos: Vec<f64> = (0..ids.len()).flat_map(|i| sinusoid(i, d)).collect();
        let pos = self.tape.constant(Tensor::new(vec![ids.len(), d], pos)?);
        let x = self.tape.add(tok, pos)?;
        self.dropout(x)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        Ok(self.tape.layer_norm(x, g, b)?)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.tape.linear(
            x,
            self.p(&format!("{prefix}.w1")),
            Some(self.p(&format!("{prefix}.b1"))),
        )?;
        let h = self.tape.gelu(h)?;
        Ok(self.tape.linear(
            h,
            self.p(&format!("{prefix}.w2")),
            Some(self.p(&format!("{prefix}.b2"))),
        )?)
    }

    /// Multi-head attention. `keep` is a full `[queries × keys]` mask.
    /// Returns the projected output and the per-head probabilities.
    fn attention(&mut self, xq: Var, xkv: Var, keep: &[bool], prefix: &str) -> Result<(Var, Vec<Var>)> {
        let w = |s: &str| format!("{prefix}.{s}");
        let q = self.tape.linear(xq, self.p(&w("wq")), Some(self.p(&w("bq"))))?;
        let k = self.tape.linear(xkv, self.p(&w("wk")), Some(self.p(&w("bk"))))?;
        let v = self.tape.linear(xkv, self.p(&w("wv")), Some(self.p(&w("bv"))))?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        let mut probs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = self.tape.slice_cols(q, h * hd, hd)?;
            let kh = self.tape.slice_cols(k, h * hd, hd)?;
            let vh = self.tape.slice_cols(v, h * hd, hd)?;
            let s = self.tape.matmul_nt(qh, kh)?;
            let s = self.tape.scale(s, scale)?;
            let a = self.tape.softmax_masked(s, 1, Some(keep))?;
            outs.push(self.tape.matmul(a, vh)?);
            probs.push(a);
        }
        let cat = self.tape.concat_cols(&outs)?;
        let out = self.tape.linear(cat, self.p(&w("wo")), Some(self.p(&w("bo"))))?;
        Ok((out, probs))
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var> {
        let update = self.dropout(update)?;
        Ok(self.tape.add(x, update)?)
    }

    /// Bidirectional encoder over one sequence.
    pub fn encode(&mut self, ids: &[usize]) -> Result<EncodedVars> {
        self.check_ids(ids)?;
        let n = ids.len();
        let keep: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
        let mask: Vec<bool> = (0..n).flat_map(|_| keep.iter().copied()).collect();
        let mut x = self.embed(ids)?;
        for l in 0..self.cfg.encoder_layers {
            let h = self.norm(x, &format!("enc.{l}.ln1"))?;
            let (a, _) = self.attention(h, h, &mask, &format!("enc.{l}.attn"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("enc.{l}.ln2"))?;
            let f = self.ffn(h, &format!("enc.{l}.ffn"))?;
            x = self.residual(x, f)?;
        }
        let hidden = self.norm(x, "enc.ln_f")?;
        let pooled = self.tape.slice_rows(hidden, pool_position(ids), 1)?;
        Ok(EncodedVars { hidden, pooled, keep })
    }

    /// Row-concatenates encoded sequences, context first.
    pub fn memory(
        &mut self,
        context: Option<&EncodedVars>,
        passages: &[&EncodedVars],
    ) -> Result<(Var, Vec<bool>, SegmentLayout)> {
        let parts: Vec<&EncodedVars> = context.into_iter().chain(passages.iter().copied()).collect();
        let mut offsets = vec![0];
        let mut keep = Vec::new();
        for p in &parts {
            keep.extend_from_slice(&p.keep);
            offsets.push(keep.len());
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.hidden).collect();
        let states = self.tape.concat_rows(&vars)?;
        Ok((
            states,
            keep,
            SegmentLayout {
                offsets,
                has_context: context.is_some(),
            },
        ))
    }

    /// Teacher-forced decoder over `inputs` (BOS followed by the shifted target).
    pub fn decode(&mut self, inputs: &[usize], memory: Var, memory_keep: &[bool]) -> Result<DecoderVars> {
        self.check_ids(inputs)?;
        let t = inputs.len();
        let m = memory_keep.len();
        let causal: Vec<bool> = (0..t).flat_map(|i| (0..t).map(move |j| j <= i)).collect();
        let cross: Vec<bool> = (0..t).flat_map(|_| memory_keep.iter().copied()).collect();
        debug_assert_eq!(cross.len(), t * m);
        let mut x = self.embed(inputs)?;
        let mut cross_attention = Vec::with_capacity(self.cfg.decoder_layers);
        for l in 0..self.cfg.decoder_layers {
            let h = self.norm(x, &format!("dec.{l}.ln1"))?;
            let (a, _) = self.attention(h, h, &causal, &format!("dec.{l}.self"))?;
            x = self.residual(x, a)?;
            let h = self.norm(x, &format!("dec.{l}.ln2"))?;
            let (c, probs) = self.attention(h, memory, &cross, &format!("dec.{l}.cross"))?;
            cross_attention.push(probs);
            x = self.residual(x, c)?;
            let h = self.norm(x, &format!("dec.{l}.ln3"))?;
            let f = self.ffn(h, &format!("dec.{l}.ffn"))?;
            x = self.residual(x, f)?;
        }
        let h = self.norm(x, "dec.ln_f")?;
        let logits = self
            .tape
            .linear(h, self.p("lm_head.w"), Some(self.p("lm_head.b")))?;
        Ok(DecoderVars {
            logits,
            cross_attention,
        })
    }

    /// Raw relevance score `[1 × 1]` of a pooled state `[1 × d]`.
    pub fn score(&mut self, pooled: Var) -> Result<Var> {
        let h = self
            .tape
            .linear(pooled, self.p("score.w1"), Some(self.p("score.b1")))?;
        let h = self.tape.gelu(h)?;
        Ok(self
            .tape
            .linear(h, self.p("score.w2"), Some(self.p("score.b2")))?)
    }

    /// Per-passage attention mass averaged over layers, heads, unpadded
    /// passage tokens and decoded steps; the context segment is skipped.
    /// Returns a vector with one entry per passage.
    pub fn pooled_passage_attention(
        &mut self,
        dec: &DecoderVars,
        layout: &SegmentLayout,
        memory_keep: &[bool],
    ) -> Result<Var> {
        let first = dec
            .cross_attention
            .first()
            .and_then(|h| h.first())
            .ok_or(ModelError::NoDecodedSteps)?;
        let steps = self.tape.shape(*first)[0];
        if steps == 0 {
            return Err(ModelError::NoDecodedSteps);
        }
        let lh = dec.cross_attention.iter().map(Vec::len).sum::<usize>();
        let mut entries = Vec::new();
        for range in layout.passage_ranges() {
            let unpadded = memory_keep[range.clone()].iter().filter(|&&k| k).count().max(1);
            let mut sums = Vec::with_capacity(lh);
            for &probs in dec.cross_attention.iter().flatten() {
                let block = self.tape.slice_cols(probs, range.start, range.len())?;
                let s = self.tape.sum(block)?;
                sums.push(self.tape.reshape(s, &[1, 1])?);
            }
            let total = self.tape.concat_cols(&sums)?;
            let total = self.tape.sum(total)?;
            let mean = self
                .tape
                .scale(total, 1.0 / (lh * unpadded * steps) as f64)?;
            entries.push(self.tape.reshape(mean, &[1, 1])?);
        }
        let row = self.tape.concat_cols(&entries)?;
        let n = layout.passage_ranges().len();
        Ok(self.tape.reshape(row, &[n])?)
    }
}
