//! Minibatch AdamW training on sentence-level tuples.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{EngineError, Result, TextModel};
use crate::data::TrainingSample;
use crate::losses::{kd_on_tape, nll_on_tape, rank_on_tape, total_on_tape, LossBreakdown};
use crate::model::{save_checkpoint, Graph, SegmentLayout};
use crate::numerics::{adamw_step, softmax, AdamState, AdamWConfig, RngState, Tape, Var};
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Train with the distillation term.
    pub use_kd: bool,
    /// Dropout during training (the model's configured rate).
    pub dropout: bool,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            max_steps: None,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            clip_norm: Some(5.0),
            use_kd: true,
            dropout: true,
            seed: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

/// Mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_gen: f64,
    pub l_rank: f64,
    pub l_kd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Memory layout used for every training tuple: context, positive, negative.
pub fn training_memory_layout(context_len: usize, pos_len: usize, neg_len: usize) -> SegmentLayout {
    SegmentLayout {
        offsets: vec![0, context_len, context_len + pos_len, context_len + pos_len + neg_len],
        has_context: true,
    }
}

/// Graph of one tuple's objectives.
pub(crate) struct SampleGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Raw combined scores of (positive, negative).
    pub scores: (f64, f64),
}

pub(crate) fn build_sample_graph(
    tape: &mut Tape,
    bindings: &crate::model::Bindings,
    tm: &TextModel,
    sample: &TrainingSample,
    use_kd: bool,
    rng: Option<&mut RngState>,
    frozen_rel: Option<&[f64]>,
) -> Result<SampleGraph> {
    let cfg = tm.model.config().clone();
    let ctx_ids = tm.context_ids(&sample.context)?;
    let pos_ids = tm.passage_ids(&sample.query, &sample.positive.text)?;
    let neg_ids = tm.passage_ids(&sample.query, &sample.negative.text)?;
    let target = tm.sentence_ids(&sample.sentence);
    let mut inputs = vec![BOS];
    inputs.extend(&target);
    let mut outputs = target;
    outputs.push(EOS);

    let mut g = Graph::new(tape, bindings, &cfg, rng);
    let ctx = g.encode(&ctx_ids)?;
    let pos = g.encode(&pos_ids)?;
    let neg = g.encode(&neg_ids)?;
    let (memory, keep, layout) = g.memory(Some(&ctx), &[&pos, &neg])?;
    let dec = g.decode(&inputs, memory, &keep)?;
    let mut s_pos = g.score(pos.pooled)?;
    let mut s_neg = g.score(neg.pooled)?;
    let pooled_att = g.pooled_passage_attention(&dec, &layout, &keep)?;
    let tape = g.tape;
    if !sample.context.trim().is_empty() {
        let scale = 1.0 / (cfg.hidden_dim as f64).sqrt();
        for (s, p) in [(&mut s_pos, pos.pooled), (&mut s_neg, neg.pooled)] {
            let dot = tape.matmul_nt(p, ctx.pooled)?;
            let dot = tape.scale(dot, scale)?;
            *s = tape.add(*s, dot)?;
        }
    }
    let l_gen = nll_on_tape(tape, dec.logits, &outputs)?;
    let l_rank = rank_on_tape(tape, s_pos, s_neg)?;
    let scores = (tape.value(s_pos).item(), tape.value(s_neg).item());
    let s_rel = match frozen_rel {
        Some(r) => r.to_vec(),
        None => softmax(&[scores.0, scores.1])?,
    };
    let l_kd = kd_on_tape(tape, &s_rel, pooled_att)?;
    let total = total_on_tape(tape, l_gen, l_rank, use_kd.then_some(l_kd), cfg.alpha)?;
    let breakdown = LossBreakdown::new(
        tape.value(l_gen).item(),
        tape.value(l_rank).item(),
        tape.value(l_kd).item(),
        cfg.alpha,
        use_kd,
    )?;
    Ok(SampleGraph {
        total,
        breakdown,
        scores,
    })
}

/// Loss values of one tuple without dropout or gradients.
pub fn evaluate_sample(tm: &TextModel, sample: &TrainingSample, use_kd: bool) -> Result<(LossBreakdown, (f64, f64))> {
    let mut tape = Tape::new();
    let bindings = tm.model.bind(&mut tape, false);
    let g = build_sample_graph(&mut tape, &bindings, tm, sample, use_kd, None, None)?;
    Ok((g.breakdown, g.scores))
}

/// Gradients of one tuple's total loss without dropout.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    pub breakdown: LossBreakdown,
    /// Relevance distribution used as the distillation target.
    pub s_rel: Vec<f64>,
    /// Parameter gradients by name.
    pub grads: BTreeMap<String, Vec<f64>>,
}

pub fn sample_gradients(tm: &TextModel, sample: &TrainingSample, use_kd: bool) -> Result<SampleGradients> {
    let mut tape = Tape::new();
    let bindings = tm.model.bind(&mut tape, true);
    let g = build_sample_graph(&mut tape, &bindings, tm, sample, use_kd, None, None)?;
    tape.backward(g.total)?;
    let mut model = tm.model.clone();
    model.params_mut().zero_grads();
    model.collect_grads(&tape, &bindings)?;
    let grads = model
        .params()
        .iter()
        .map(|(name, p)| {
            let g = p.grad.as_ref().map_or_else(|| vec![0.0; p.value.numel()], |g| g.data().to_vec());
            (name.to_string(), g)
        })
        .collect();
    Ok(SampleGradients {
        breakdown: g.breakdown,
        s_rel: softmax(&[g.scores.0, g.scores.1])?,
        grads,
    })
}

/// Total loss of one tuple with the distillation target held at `s_rel`.
pub fn sample_total_frozen(tm: &TextModel, sample: &TrainingSample, use_kd: bool, s_rel: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let bindings = tm.model.bind(&mut tape, false);
    let g = build_sample_graph(&mut tape, &bindings, tm, sample, use_kd, None, Some(s_rel))?;
    Ok(g.breakdown.total)
}

fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Trains in place. Sample order is reshuffled each epoch from `cfg.seed`.
pub fn train(samples: &[TrainingSample], tm: &mut TextModel, cfg: &TrainConfig) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(EngineError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(EngineError::Config("batch_size must be at least 1".into()));
    }
    let mut rng = RngState::new(cfg.seed);
    let opt = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut adam = AdamState::new();
    let mut log = match &cfg.log_path {
        Some(p) => Some(fs::File::create(p).map_err(io_err(p))?),
        None => None,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        tm.vocab.save(&dir.join("vocab.txt"))?;
    }
    let mut report = TrainReport {
        steps: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            tm.model.params_mut().zero_grads();
            let mut sums = [0.0; 4];
            for &i in batch {
                let mut tape = Tape::new();
                let bindings = tm.model.bind(&mut tape, true);
                let mut drop_rng = rng.fork();
                let g = build_sample_graph(
                    &mut tape,
                    &bindings,
                    tm,
                    &samples[i],
                    cfg.use_kd,
                    cfg.dropout.then_some(&mut drop_rng),
                    None,
                )?;
                let b = g.breakdown;
                if !b.total.is_finite() {
                    return Err(EngineError::Diverged { step });
                }
                let loss = tape.scale(g.total, 1.0 / batch.len() as f64)?;
                tape.backward(loss)?;
                tm.model.collect_grads(&tape, &bindings)?;
                for (s, v) in sums.iter_mut().zip([b.l_gen, b.l_rank, b.l_kd, b.total]) {
                    *s += v / batch.len() as f64;
                }
            }
            let params = tm.model.params_mut();
            if let Some(max) = cfg.clip_norm {
                let norm = params.grad_norm();
                if !norm.is_finite() {
                    return Err(EngineError::Diverged { step });
                }
                if norm > max {
                    params.scale_grads(max / norm);
                }
            }
            adamw_step(params, &mut adam, &opt)?;
            let rec = StepRecord {
                step,
                epoch,
                l_gen: sums[0],
                l_rank: sums[1],
                l_kd: sums[2],
                total: sums[3],
            };
            if let (Some(f), Some(p)) = (log.as_mut(), cfg.log_path.as_ref()) {
                writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io_err(p))?;
            }
            report.steps.push(rec);
            step += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch-{}.ckpt", epoch + 1));
            save_checkpoint(&tm.model, &path)?;
            report.checkpoints.push(path);
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("model.ckpt");
        save_checkpoint(&tm.model, &path)?;
        report.checkpoints.push(path);
    }
    Ok(report)
}
