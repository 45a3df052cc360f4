//! Per-iteration passage scoring and subset selection.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::numerics::kernels::dot;
use crate::numerics::softmax;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("no passages to score")]
    Empty,
    #[error("hidden dimension mismatch: passage {index} has {got}, context has {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("every passage has already been utilized")]
    Exhausted,
}

pub type Result<T> = std::result::Result<T, SelectionError>;

/// Query and context relevance of the k candidate passages.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceScores {
    pub raw_query: Vec<f64>,
    pub prob_query: Vec<f64>,
    /// Absent while no text has been generated yet.
    pub raw_context: Option<Vec<f64>>,
    pub prob_context: Option<Vec<f64>>,
}

impl RelevanceScores {
    pub fn new(raw_query: Vec<f64>, raw_context: Option<Vec<f64>>) -> Result<Self> {
        let prob_query = softmax(&raw_query).map_err(|_| SelectionError::Empty)?;
        let prob_context = match &raw_context {
            Some(r) => Some(softmax(r).map_err(|_| SelectionError::Empty)?),
            None => None,
        };
        Ok(Self {
            raw_query,
            prob_query,
            raw_context,
            prob_context,
        })
    }

    pub fn len(&self) -> usize {
        self.raw_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_query.is_empty()
    }
}

/// Raw head scores of each pooled passage and their softmax.
pub fn query_relevance(pooled: &[Vec<f64>], mut score: impl FnMut(&[f64]) -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if pooled.is_empty() {
        return Err(SelectionError::Empty);
    }
    let raw: Vec<f64> = pooled.iter().map(|h| score(h)).collect();
    let probs = softmax(&raw).map_err(|_| SelectionError::Empty)?;
    Ok((raw, probs))
}

/// Scaled dot products between each pooled passage and the pooled context, and their softmax.
pub fn context_relevance(pooled: &[Vec<f64>], context: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pooled.is_empty() {
        return Err(SelectionError::Empty);
    }
    let d = context.len();
    let scale = 1.0 / (d as f64).sqrt();
    let mut raw = Vec::with_capacity(pooled.len());
    for (index, h) in pooled.iter().enumerate() {
        if h.len() != d {
            return Err(SelectionError::DimMismatch {
                index,
                expected: d,
                got: h.len(),
            });
        }
        raw.push(dot(h, context) * scale);
    }
    let probs = softmax(&raw).map_err(|_| SelectionError::Empty)?;
    Ok((raw, probs))
}

/// Query probability plus context probability; query alone when the
/// context term is disabled or unavailable.
pub fn combined_relevance(scores: &RelevanceScores, use_context: bool) -> Vec<f64> {
    match (&scores.prob_context, use_context) {
        (Some(ctx), true) => scores
            .prob_query
            .iter()
            .zip(ctx)
            .map(|(q, c)| q + c)
            .collect(),
        _ => scores.prob_query.clone(),
    }
}

/// Unutilized ordinals sorted by score, highest first, ties by ordinal.
pub fn rank_candidates(combined: &[f64], utilized: &BTreeSet<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..combined.len()).filter(|i| !utilized.contains(i)).collect();
    order.sort_by(|&a, &b| combined[b].total_cmp(&combined[a]).then(a.cmp(&b)));
    order
}

/// Top unutilized passage, plus the runner-up when its score is more than
/// `gamma` times the top score.
pub fn select_subset(combined: &[f64], utilized: &BTreeSet<usize>, gamma: f64) -> Result<Vec<usize>> {
    let order = rank_candidates(combined, utilized);
    let first = *order.first().ok_or(SelectionError::Exhausted)?;
    let mut chosen = vec![first];
    if let Some(&second) = order.get(1) {
        let top = combined[first];
        if top > 0.0 && combined[second] / top > gamma {
            chosen.push(second);
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn query_relevance_examples() {
        let (_, p) = query_relevance(&[vec![1.0, 2.0], vec![1.0, 2.0]], |h| h[0] + h[1]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let (_, p) = query_relevance(&[vec![3.0]], |h| h[0]).unwrap();
        assert_eq!(p, vec![1.0]);
        let (raw, p) = query_relevance(&[vec![2.0], vec![0.0]], |h| h[0]).unwrap();
        assert_eq!(raw, vec![2.0, 0.0]);
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        assert_eq!(query_relevance(&[], |_| 0.0), Err(SelectionError::Empty));
    }

    #[test]
    fn context_relevance_examples() {
        let t = [2.0, 0.0, 0.0, 0.0];
        let (raw, p) = context_relevance(&[vec![2.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0]], &t).unwrap();
        // dot / sqrt(d), computed by hand: 4 / 2 and 0 / 2.
        assert_eq!(raw, vec![2.0, 0.0]);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        let (_, p) = context_relevance(&[vec![0.0, 1.0], vec![0.0, -3.0]], &[1.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!(matches!(
            context_relevance(&[vec![1.0, 0.0], vec![1.0]], &[1.0, 0.0]),
            Err(SelectionError::DimMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn combined_examples() {
        let s = RelevanceScores {
            raw_query: vec![0.0, 0.0],
            prob_query: vec![0.6, 0.4],
            raw_context: Some(vec![0.0, 0.0]),
            prob_context: Some(vec![0.3, 0.7]),
        };
        let c = combined_relevance(&s, true);
        assert!((c[0] - 0.9).abs() < 1e-12 && (c[1] - 1.1).abs() < 1e-12);
        assert_eq!(combined_relevance(&s, false), s.prob_query);
        let first = RelevanceScores { prob_context: None, ..s.clone() };
        assert_eq!(combined_relevance(&first, true), s.prob_query);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_subset(&[1.0, 0.9, 0.1], &set(&[]), 0.8).unwrap(), vec![0, 1]);
        assert_eq!(select_subset(&[1.0, 0.5, 0.1], &set(&[]), 0.8).unwrap(), vec![0]);
        assert_eq!(select_subset(&[1.0, 0.9, 0.1], &set(&[0]), 0.8).unwrap()[0], 1);
        assert_eq!(select_subset(&[0.5, 0.5], &set(&[]), 0.8).unwrap(), vec![0, 1]);
        assert_eq!(select_subset(&[1.0, 0.9], &set(&[0, 1]), 0.8), Err(SelectionError::Exhausted));
    }

    proptest! {
        #[test]
        fn scores_normalize(q in prop::collection::vec(-20.0f64..20.0, 1..20), seed in 0u64..1000) {
            let ctx: Vec<f64> = q.iter().enumerate().map(|(i, v)| v * 0.3 + (i as u64 * seed % 7) as f64).collect();
            let s = RelevanceScores::new(q, Some(ctx)).unwrap();
            let c = combined_relevance(&s, true);
            prop_assert!((s.prob_query.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((s.prob_context.as_ref().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((c.iter().sum::<f64>() - 2.0).abs() < 1e-9);
            prop_assert!(c.iter().all(|&v| (0.0..=2.0).contains(&v)));
        }

        #[test]
        fn selection_avoids_utilized(c in prop::collection::vec(0.0f64..2.0, 2..15), used in prop::collection::btree_set(0usize..15, 0..10), gamma in 0.05f64..1.0) {
            let used: BTreeSet<usize> = used.into_iter().filter(|&u| u < c.len()).collect();
            match select_subset(&c, &used, gamma) {
                Ok(sel) => {
                    prop_assert!(!sel.is_empty() && sel.len() <= 2);
                    prop_assert!(sel.iter().all(|s| !used.contains(s)));
                    let best = (0..c.len()).filter(|i| !used.contains(i)).map(|i| c[i]).fold(f64::MIN, f64::max);
                    prop_assert_eq!(c[sel[0]], best);
                }
                Err(e) => {
                    prop_assert_eq!(e, SelectionError::Exhausted);
                    prop_assert_eq!(used.len(), c.len());
                }
            }
        }

        #[test]
        fn permutation_equivariance(pooled in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..8), ctx in prop::collection::vec(-2.0f64..2.0, 3), rot in 0usize..8) {
            let k = pooled.len();
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| pooled[i].clone()).collect();
            let head = |h: &[f64]| h[0] * 0.7 - h[1] + h[2].tanh();
            let (_, a) = query_relevance(&pooled, head).unwrap();
            let (_, b) = query_relevance(&permuted, head).unwrap();
            let (_, ca) = context_relevance(&pooled, &ctx).unwrap();
            let (_, cb) = context_relevance(&permuted, &ctx).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((a[i] - b[j]).abs() < 1e-12);
                prop_assert!((ca[i] - cb[j]).abs() < 1e-12);
            }
        }
    }
}
