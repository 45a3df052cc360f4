//! BLEU and ROUGE-L over normalized word tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::normalize_words;

/// Floor for zero n-gram matches.
pub const BLEU_EPSILON: f64 = 1e-9;
/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no candidates to score")]
    Empty,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("max n-gram order {0} outside 1..=4")]
    Order(usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn is_mark(word: &str) -> bool {
    word.len() > 2
        && word.starts_with('[')
        && word.ends_with(']')
        && word[1..word.len() - 1].chars().all(|c| c.is_ascii_digit())
}

/// Removes whitespace-delimited reference marks such as `[3]`.
pub fn strip_marks(text: &str) -> String {
    text.split_whitespace()
        .filter(|w| !is_mark(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tokens used by every metric: marks removed, then normalized.
pub fn metric_tokens(text: &str) -> Vec<String> {
    normalize_words(&strip_marks(text))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights up to `max_n`, brevity penalty, and an
/// epsilon floor on zero match counts.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R], max_n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(EvalError::Empty);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if !(1..=4).contains(&max_n) {
        return Err(EvalError::Order(max_n));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let c = metric_tokens(c.as_ref());
        let r = metric_tokens(r.as_ref());
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(&r, n);
            for (g, k) in ngram_counts(&c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..max_n)
        .map(|i| {
            let p = if matched[i] == 0 || total[i] == 0 {
                BLEU_EPSILON
            } else {
                matched[i] as f64 / total[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with recall weight [`ROUGE_BETA`].
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = metric_tokens(candidate);
    let r = metric_tokens(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
}

/// Corpus BLEU, mean ROUGE-L, and per-example scores, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub examples: Vec<ExampleScores>,
}

pub fn evaluate<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<MetricReport> {
    let bleu1 = bleu(candidates, references, 1)?;
    let bleu4 = bleu(candidates, references, 4)?;
    let examples: Vec<ExampleScores> = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            Ok(ExampleScores {
                bleu1: bleu(&[c.as_ref()], &[r.as_ref()], 1)?,
                bleu4: bleu(&[c.as_ref()], &[r.as_ref()], 4)?,
                rouge_l: rouge_l(c.as_ref(), r.as_ref()),
            })
        })
        .collect::<Result<_>>()?;
    let rouge = examples.iter().map(|e| e.rouge_l).sum::<f64>() / examples.len() as f64;
    Ok(MetricReport {
        bleu1,
        bleu4,
        rouge_l: rouge,
        examples,
    })
}

impl MetricReport {
    pub fn table_header() -> String {
        format!("{:<12} {:>8} {:>8} {:>8}", "system", "BLEU-1", "BLEU-4", "ROUGE-L")
    }

    /// Scores scaled by 100, one decimal.
    pub fn table_row(&self, name: &str) -> String {
        format!(
            "{:<12} {:>8.1} {:>8.1} {:>8.1}",
            name,
            self.bleu1 * 100.0,
            self.bleu4 * 100.0,
            self.rouge_l * 100.0
        )
    }
}
