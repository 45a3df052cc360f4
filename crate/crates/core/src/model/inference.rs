//! Incremental decoding with cached keys and values.

use super::{CrossAttentionRecord, Memory, ModelError, Result, Seq2Seq, SegmentLayout};
use crate::numerics::kernels::{dot, gelu, layer_norm_row, masked_softmax_in_place, sinusoid, softmax_in_place, vec_mat};
use crate::numerics::{log_softmax, Tensor};
use crate::tokenizer::{BOS, EOS, PAD};

/// Decoder state after consuming a prefix one token at a time.
#[derive(Debug, Clone)]
pub struct DecoderState<'m> {
    model: &'m Seq2Seq,
    keep: Vec<bool>,
    layout: SegmentLayout,
    /// Per layer `[memory × d]`.
    cross_k: Vec<Vec<f64>>,
    cross_v: Vec<Vec<f64>>,
    /// Per layer, grows by one row per step.
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    /// Per layer and head, one row of memory weights per step.
    rows: Vec<Vec<Vec<f64>>>,
    pos: usize,
}

fn project(x: &[f64], model: &Seq2Seq, prefix: &str, w: &str, d: usize) -> Vec<f64> {
    vec_mat(
        x,
        model.weight(&format!("{prefix}.w{w}")),
        Some(model.weight(&format!("{prefix}.b{w}"))),
        d,
    )
}

fn norm(x: &[f64], model: &Seq2Seq, prefix: &str) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layer_norm_row(
        x,
        model.weight(&format!("{prefix}.g")),
        model.weight(&format!("{prefix}.b")),
        &mut out,
    );
    out
}

impl<'m> DecoderState<'m> {
    pub fn new(model: &'m Seq2Seq, memory: &Memory) -> Result<Self> {
        let cfg = model.config();
        let d = cfg.hidden_dim;
        let (rows, md) = memory.states.dims2()?;
        if md != d && rows > 0 {
            return Err(ModelError::DimMismatch { expected: d, got: md });
        }
        let mut cross_k = Vec::with_capacity(cfg.decoder_layers);
        let mut cross_v = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let prefix = format!("dec.{l}.cross");
            let mut k = Vec::with_capacity(rows * d);
            let mut v = Vec::with_capacity(rows * d);
            for r in 0..rows {
                let x = memory.states.row(r);
                k.extend(project(x, model, &prefix, "k", d));
                v.extend(project(x, model, &prefix, "v", d));
            }
            cross_k.push(k);
            cross_v.push(v);
        }
        Ok(Self {
            model,
            keep: memory.keep.clone(),
            layout: memory.layout.clone(),
            cross_k,
            cross_v,
            self_k: vec![Vec::new(); cfg.decoder_layers],
            self_v: vec![Vec::new(); cfg.decoder_layers],
            rows: vec![vec![Vec::new(); cfg.heads]; cfg.decoder_layers],
            pos: 0,
        })
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes one token and returns the logits for the next.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let model = self.model;
        let cfg = model.config();
        let d = cfg.hidden_dim;
        let hd = cfg.head_dim();
        if token >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if self.pos >= cfg.max_positions {
            return Err(ModelError::TooLong {
                len: self.pos + 1,
                max: cfg.max_positions,
            });
        }
        let emb = &model.weight("tok_emb")[token * d..(token + 1) * d];
        let mut x: Vec<f64> = emb
            .iter()
            .zip(sinusoid(self.pos, d))
            .map(|(a, b)| a + b)
            .collect();
        let scale = 1.0 / (hd as f64).sqrt();
        let m = self.keep.len();
        for l in 0..cfg.decoder_layers {
            let prefix = format!("dec.{l}.self");
            let h = norm(&x, model, &format!("dec.{l}.ln1"));
            let q = project(&h, model, &prefix, "q", d);
            self.self_k[l].extend(project(&h, model, &prefix, "k", d));
            self.self_v[l].extend(project(&h, model, &prefix, "v", d));
            let t = self.pos + 1;
            let mut cat = vec![0.0; d];
            for head in 0..cfg.heads {
                let qh = &q[head * hd..(head + 1) * hd];
                let mut w: Vec<f64> = (0..t)
                    .map(|j| dot(qh, &self.self_k[l][j * d + head * hd..j * d + (head + 1) * hd]) * scale)
                    .collect();
                softmax_in_place(&mut w);
                for (j, wj) in w.iter().enumerate() {
                    let vj = &self.self_v[l][j * d + head * hd..j * d + (head + 1) * hd];
                    for (c, v) in cat[head * hd..(head + 1) * hd].iter_mut().zip(vj) {
                        *c += wj * v;
                    }
                }
            }
            let out = project(&cat, model, &prefix, "o", d);
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);

            let prefix = format!("dec.{l}.cross");
            let h = norm(&x, model, &format!("dec.{l}.ln2"));
            let q = project(&h, model, &prefix, "q", d);
            let mut cat = vec![0.0; d];
            for head in 0..cfg.heads {
                let qh = &q[head * hd..(head + 1) * hd];
                let mut w: Vec<f64> = (0..m)
                    .map(|j| dot(qh, &self.cross_k[l][j * d + head * hd..j * d + (head + 1) * hd]) * scale)
                    .collect();
                masked_softmax_in_place(&mut w, &self.keep);
                for (j, wj) in w.iter().enumerate() {
                    let vj = &self.cross_v[l][j * d + head * hd..j * d + (head + 1) * hd];
                    for (c, v) in cat[head * hd..(head + 1) * hd].iter_mut().zip(vj) {
                        *c += wj * v;
                    }
                }
                self.rows[l][head].extend_from_slice(&w);
            }
            let out = project(&cat, model, &prefix, "o", d);
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);

            let prefix = format!("dec.{l}.ffn");
            let h = norm(&x, model, &format!("dec.{l}.ln3"));
            let mut f = vec_mat(
                &h,
                model.weight(&format!("{prefix}.w1")),
                Some(model.weight(&format!("{prefix}.b1"))),
                cfg.ffn_dim,
            );
            f.iter_mut().for_each(|v| *v = gelu(*v));
            let out = vec_mat(
                &f,
                model.weight(&format!("{prefix}.w2")),
                Some(model.weight(&format!("{prefix}.b2"))),
                d,
            );
            x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
        }
        let h = norm(&x, model, "dec.ln_f");
        self.pos += 1;
        Ok(vec_mat(
            &h,
            model.weight("lm_head.w"),
            Some(model.weight("lm_head.b")),
            cfg.vocab_size,
        ))
    }

    /// Cross-attention of every consumed step.
    pub fn record(&self) -> CrossAttentionRecord {
        let m = self.keep.len();
        CrossAttentionRecord {
            layers: self
                .rows
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|r| Tensor::new(vec![self.pos, m], r.clone()).expect("record rows match steps"))
                        .collect()
                })
                .collect(),
            layout: self.layout.clone(),
            keep: self.keep.clone(),
        }
    }

    pub fn into_record(self) -> CrossAttentionRecord {
        self.record()
    }
}

/// A decoded token sequence with the attention recorded while producing it.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Output tokens, BOS and EOS excluded.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Whether decoding ended on EOS rather than the length limit.
    pub finished: bool,
    /// One step per produced token (plus the EOS step when finished).
    pub record: CrossAttentionRecord,
}

fn allowed(tok: usize, suppress_eos: bool) -> bool {
    tok != PAD && tok != BOS && !(suppress_eos && tok == EOS)
}

struct Hyp<'m> {
    state: DecoderState<'m>,
    tokens: Vec<usize>,
    log_prob: f64,
    next: Vec<f64>,
    finished: bool,
}

impl Seq2Seq {
    /// Greedy decoding of up to `max_len` tokens.
    pub fn greedy(&self, memory: &Memory, max_len: usize, suppress_eos: bool) -> Result<Decoded> {
        let max_len = max_len.min(self.config().max_positions);
        let mut state = DecoderState::new(self, memory)?;
        let mut logits = state.step(BOS)?;
        let mut tokens = Vec::new();
        let mut log_prob = 0.0;
        let mut finished = false;
        loop {
            let lp = log_softmax(&logits)?;
            let (tok, best) = lp
                .iter()
                .enumerate()
                .filter(|(t, _)| allowed(*t, suppress_eos))
                .fold((EOS, f64::NEG_INFINITY), |acc, (t, &v)| if v > acc.1 { (t, v) } else { acc });
            log_prob += best;
            if tok == EOS {
                finished = true;
                break;
            }
            tokens.push(tok);
            if tokens.len() >= max_len {
                break;
            }
            logits = state.step(tok)?;
        }
        Ok(Decoded {
            tokens,
            log_prob,
            finished,
            record: state.into_record(),
        })
    }

    /// Beam search; the returned hypothesis maximizes length-normalized log probability.
    pub fn beam_search(&self, memory: &Memory, width: usize, max_len: usize) -> Result<Decoded> {
        let width = width.max(1);
        let max_len = max_len.min(self.config().max_positions);
        let mut state = DecoderState::new(self, memory)?;
        let next = state.step(BOS)?;
        let mut beam = vec![Hyp {
            state,
            tokens: Vec::new(),
            log_prob: 0.0,
            next,
            finished: false,
        }];
        while beam.iter().any(|h| !h.finished) {
            // (parent, token or None for a carried finished hypothesis, score)
            let mut cands: Vec<(usize, Option<usize>, f64)> = Vec::new();
            for (i, h) in beam.iter().enumerate() {
                if h.finished {
                    cands.push((i, None, h.log_prob));
                    continue;
                }
                let lp = log_softmax(&h.next)?;
                let mut order: Vec<usize> = (0..lp.len()).filter(|&t| allowed(t, false)).collect();
                order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                for &t in order.iter().take(width) {
                    cands.push((i, Some(t), h.log_prob + lp[t]));
                }
            }
            let norm = |i: usize, t: Option<usize>, s: f64| {
                let len = beam[i].tokens.len() + usize::from(t.is_some()) + 1;
                s / len as f64
            };
            cands.sort_by(|a, b| norm(b.0, b.1, b.2).total_cmp(&norm(a.0, a.1, a.2)));
            cands.truncate(width);
            let mut next_beam = Vec::with_capacity(cands.len());
            for (i, tok, score) in cands {
                let parent = &beam[i];
                match tok {
                    None => next_beam.push(Hyp {
                        state: parent.state.clone(),
                        tokens: parent.tokens.clone(),
                        log_prob: score,
                        next: Vec::new(),
                        finished: true,
                    }),
                    Some(EOS) => next_beam.push(Hyp {
                        state: parent.state.clone(),
                        tokens: parent.tokens.clone(),
                        log_prob: score,
                        next: Vec::new(),
                        finished: true,
                    }),
                    Some(t) => {
                        let mut tokens = parent.tokens.clone();
                        tokens.push(t);
                        let mut state = parent.state.clone();
                        let (next, finished) = if tokens.len() >= max_len {
                            (Vec::new(), true)
                        } else {
                            (state.step(t)?, false)
                        };
                        next_beam.push(Hyp {
                            state,
                            tokens,
                            log_prob: score,
                            next,
                            finished,
                        });
                    }
                }
            }
            beam = next_beam;
        }
        let best = beam
            .into_iter()
            .max_by(|a, b| {
                let na = a.log_prob / (a.tokens.len() + 1) as f64;
                let nb = b.log_prob / (b.tokens.len() + 1) as f64;
                na.total_cmp(&nb)
            })
            .expect("beam is never empty");
        let finished = best.state.position() == best.tokens.len() + 1;
        Ok(Decoded {
            tokens: best.tokens,
            log_prob: best.log_prob,
            finished,
            record: best.state.into_record(),
        })
    }
}
