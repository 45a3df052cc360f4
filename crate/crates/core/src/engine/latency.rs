//! Wall-clock comparison of iterative generation against one long decode.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{generate, EngineConfig, EngineError, Result, TextModel};
use crate::model::{concat_memory, EncodedSequence};
use crate::retriever::InvertedIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatencyMode {
    /// Per-sentence selection and decoding.
    Iterative,
    /// All top passages in memory at once, one fixed-length decode.
    SinglePass { passages: usize, tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: LatencyMode,
    /// Median over runs, one entry per query, in milliseconds.
    pub per_query_ms: Vec<f64>,
    pub median_ms: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Retrieves the top `passages`, encodes them, and greedily decodes exactly
/// `tokens` tokens with EOS suppressed. Returns the number of decoded tokens.
pub fn single_pass(query: &str, index: &InvertedIndex, tm: &TextModel, passages: usize, tokens: usize) -> Result<usize> {
    let hits = index.search(query, passages);
    if hits.is_empty() {
        return Err(EngineError::NoPassages(query.to_string()));
    }
    let encoded: Vec<EncodedSequence> = hits
        .iter()
        .map(|h| Ok(tm.model.encode(&tm.passage_ids(query, &h.passage.text)?)?))
        .collect::<Result<_>>()?;
    let refs: Vec<&EncodedSequence> = encoded.iter().collect();
    let memory = concat_memory(None, &refs)?;
    Ok(tm.model.greedy(&memory, tokens, true)?.tokens.len())
}

fn run_once(query: &str, index: &InvertedIndex, tm: &TextModel, cfg: &EngineConfig, mode: LatencyMode) -> Result<f64> {
    let start = Instant::now();
    match mode {
        LatencyMode::Iterative => {
            generate(query, index, tm, cfg)?;
        }
        LatencyMode::SinglePass { passages, tokens } => {
            single_pass(query, index, tm, passages, tokens)?;
        }
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Times every mode on every query, interleaving modes per query so that
/// drift in machine load affects them alike.
pub fn measure_latency(
    queries: &[String],
    index: &InvertedIndex,
    tm: &TextModel,
    cfg: &EngineConfig,
    modes: &[LatencyMode],
    runs: usize,
) -> Result<Vec<LatencyReport>> {
    let runs = runs.max(1);
    let mut per_mode: Vec<Vec<f64>> = vec![Vec::with_capacity(queries.len()); modes.len()];
    for q in queries {
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(runs); modes.len()];
        for _ in 0..runs {
            for (m, &mode) in modes.iter().enumerate() {
                samples[m].push(run_once(q, index, tm, cfg, mode)?);
            }
        }
        for (m, s) in samples.iter().enumerate() {
            per_mode[m].push(median(s));
        }
    }
    Ok(modes
        .iter()
        .zip(per_mode)
        .map(|(&mode, per_query_ms)| LatencyReport {
            mode,
            median_ms: median(&per_query_ms),
            per_query_ms,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
