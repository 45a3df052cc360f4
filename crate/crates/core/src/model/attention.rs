use super::{DecoderVars, ModelError, Result, SegmentLayout};
use crate::numerics::{Tape, Tensor};

/// Cross-attention probabilities captured while decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionRecord {
    /// `[layer][head]`, each `[steps × memory]`.
    pub layers: Vec<Vec<Tensor>>,
    pub layout: SegmentLayout,
    pub keep: Vec<bool>,
}

impl CrossAttentionRecord {
    pub fn steps(&self) -> usize {
        self.layers
            .first()
            .and_then(|h| h.first())
            .map_or(0, |t| t.shape()[0])
    }

    /// Copies the probabilities of a teacher-forced pass off the tape.
    pub fn from_tape(tape: &Tape, dec: &DecoderVars, layout: &SegmentLayout, keep: &[bool]) -> Self {
        Self {
            layers: dec
                .cross_attention
                .iter()
                .map(|heads| heads.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
            layout: layout.clone(),
            keep: keep.to_vec(),
        }
    }
}

/// Mean attention on each reference passage over layers, heads, unpadded
/// passage tokens and decoded steps. The context segment is not reported.
pub fn extract_passage_attention(record: &CrossAttentionRecord) -> Result<Vec<f64>> {
    let steps = record.steps();
    if steps == 0 {
        return Err(ModelError::NoDecodedSteps);
    }
    let m = record.keep.len();
    let lh: usize = record.layers.iter().map(Vec::len).sum();
    let ranges = record.layout.passage_ranges();
    let mut out = Vec::with_capacity(ranges.len());
    for range in ranges {
        let unpadded = record.keep[range.clone()].iter().filter(|&&k| k).count().max(1);
        let mut total = 0.0;
        for probs in record.layers.iter().flatten() {
            for s in 0..steps {
                total += probs.data()[s * m + range.start..s * m + range.end]
                    .iter()
                    .sum::<f64>();
            }
        }
        out.push(total / (lh * unpadded * steps) as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_is_flat() {
        let layout = SegmentLayout {
            offsets: vec![0, 2, 5, 8],
            has_context: true,
        };
        let probs = Tensor::full(&[3, 8], 1.0 / 8.0);
        let record = CrossAttentionRecord {
            layers: vec![vec![probs.clone(), probs.clone()], vec![probs.clone(), probs]],
            layout,
            keep: vec![true; 8],
        };
        let pooled = extract_passage_attention(&record).unwrap();
        assert_eq!(pooled.len(), 2);
        for v in pooled {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_record_is_an_error() {
        let record = CrossAttentionRecord {
            layers: vec![vec![Tensor::zeros(&[0, 4])]],
            layout: SegmentLayout {
                offsets: vec![0, 4],
                has_context: false,
            },
            keep: vec![true; 4],
        };
        assert!(matches!(
            extract_passage_attention(&record),
            Err(ModelError::NoDecodedSteps)
        ));
    }
}
