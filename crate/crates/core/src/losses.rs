//! Generation, ranking and distillation objectives, as plain values and on a tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::kernels::softplus;
use crate::numerics::{log_softmax, NumericsError, Tape, Tensor, Var};
use crate::tokenizer::PAD;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{logits} logit rows for {targets} targets")]
    LengthMismatch { logits: usize, targets: usize },
    #[error("relevance distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("empty distribution")]
    Empty,
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// The three objectives of one step and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gen: f64,
    pub l_rank: f64,
    pub l_kd: f64,
    pub total: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    /// `use_kd = false` drops the distillation term from the total.
    pub fn new(l_gen: f64, l_rank: f64, l_kd: f64, alpha: f64, use_kd: bool) -> Result<Self> {
        let kd = if use_kd { l_kd } else { 0.0 };
        Ok(Self {
            l_gen,
            l_rank,
            l_kd: kd,
            total: total_loss(l_gen, l_rank, kd, alpha)?,
            alpha,
        })
    }
}

/// Summed negative log-likelihood of `targets`; PAD targets are skipped.
/// `logits` is `[targets × vocab]`.
pub fn nll_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (rows, _) = logits.dims2()?;
    if rows != targets.len() {
        return Err(LossError::LengthMismatch {
            logits: rows,
            targets: targets.len(),
        });
    }
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let lp = log_softmax(logits.row(i))?;
        loss -= lp.get(t).copied().ok_or(NumericsError::Index {
            index: t,
            extent: lp.len(),
        })?;
    }
    Ok(loss)
}

/// Per-token mean of the NLL, for reporting.
pub fn nll_per_token(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let n = targets.iter().filter(|&&t| t != PAD).count();
    Ok(nll_loss(logits, targets)? / n.max(1) as f64)
}

/// `ln(1 + exp(-(pos - neg)))`.
pub fn pairwise_rank_loss(pos: f64, neg: f64) -> f64 {
    softplus(neg - pos)
}

fn check_distribution(s_rel: &[f64]) -> Result<()> {
    if s_rel.is_empty() {
        return Err(LossError::Empty);
    }
    let sum: f64 = s_rel.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || s_rel.iter().any(|&v| v < 0.0) {
        return Err(LossError::NotNormalized(sum));
    }
    Ok(())
}

fn entropy_term(s_rel: &[f64]) -> f64 {
    s_rel.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum()
}

/// `KL(s_rel || softmax(pooled_attention))` with `0 ln 0 = 0`.
pub fn kd_loss(s_rel: &[f64], pooled_attention: &[f64]) -> Result<f64> {
    check_distribution(s_rel)?;
    if s_rel.len() != pooled_attention.len() {
        return Err(LossError::LengthMismatch {
            logits: pooled_attention.len(),
            targets: s_rel.len(),
        });
    }
    let log_att = log_softmax(pooled_attention)?;
    let cross: f64 = s_rel
        .iter()
        .zip(&log_att)
        .filter(|(&p, _)| p > 0.0)
        .map(|(p, l)| p * l)
        .sum();
    Ok(entropy_term(s_rel) - cross)
}

/// `alpha * l_gen + (1 - alpha) * (l_rank + l_kd)`.
pub fn total_loss(l_gen: f64, l_rank: f64, l_kd: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::Alpha(alpha));
    }
    Ok(alpha * l_gen + (1.0 - alpha) * (l_rank + l_kd))
}

/// Tape version of [`nll_loss`]; `logits` is `[targets × vocab]`.
pub fn nll_on_tape(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let (rows, vocab) = tape.value(logits).dims2()?;
    if rows != targets.len() {
        return Err(LossError::LengthMismatch {
            logits: rows,
            targets: targets.len(),
        });
    }
    let lp = tape.log_softmax(logits)?;
    let picks: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(i, &t)| i * vocab + t)
        .collect();
    if picks.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let picked = tape.gather(lp, &picks)?;
    let s = tape.sum(picked)?;
    Ok(tape.scale(s, -1.0)?)
}

/// Tape version of [`pairwise_rank_loss`] on scalar-valued scores.
pub fn rank_on_tape(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let diff = tape.sub(neg, pos)?;
    let sp = tape.softplus(diff)?;
    Ok(tape.sum(sp)?)
}

/// Tape version of [`kd_loss`]; `s_rel` enters as a constant.
pub fn kd_on_tape(tape: &mut Tape, s_rel: &[f64], pooled_attention: Var) -> Result<Var> {
    check_distribution(s_rel)?;
    let j = tape.value(pooled_attention).numel();
    if j != s_rel.len() {
        return Err(LossError::LengthMismatch {
            logits: j,
            targets: s_rel.len(),
        });
    }
    let flat = tape.reshape(pooled_attention, &[j])?;
    let log_att = tape.log_softmax(flat)?;
    let weights = tape.constant(Tensor::vector(s_rel.to_vec()));
    let cross = tape.mul(weights, log_att)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0)?;
    let h = tape.constant(Tensor::scalar(entropy_term(s_rel)));
    Ok(tape.add(neg, h)?)
}

/// Tape version of [`total_loss`]; `l_kd = None` drops the distillation term.
pub fn total_on_tape(tape: &mut Tape, l_gen: Var, l_rank: Var, l_kd: Option<Var>, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::Alpha(alpha));
    }
    let g = tape.scale(l_gen, alpha)?;
    let aux = match l_kd {
        Some(kd) => tape.add(l_rank, kd)?,
        None => l_rank,
    };
    let aux = tape.scale(aux, 1.0 - alpha)?;
    Ok(tape.add(g, aux)?)
}
