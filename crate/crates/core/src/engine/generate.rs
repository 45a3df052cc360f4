//! Sentence-by-sentence generation over a fixed retrieved passage set.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{EngineConfig, EngineError, GenerationModel, Result};
use crate::model::{concat_memory, extract_passage_attention, EncodedSequence};
use crate::retriever::InvertedIndex;
use crate::selection::{
    combined_relevance, context_relevance, query_relevance, rank_candidates, select_subset, RelevanceScores,
    SelectionError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedPassage {
    pub id: String,
    pub text: String,
    pub bm25: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Enough distinct passages have been used.
    Utilized,
    MaxIterations,
    /// The decoder produced nothing.
    EmptySentence,
    /// No unutilized passage was left to select.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub combined: Vec<f64>,
    /// Ordinals into the retrieved passages, in selection order.
    pub selected: Vec<usize>,
    pub sentence: String,
    /// Mean decoder attention on each selected passage.
    pub pooled_attention: Option<Vec<f64>>,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub query: String,
    pub passages: Vec<RetrievedPassage>,
    pub prob_query: Vec<f64>,
    /// How many times the query relevance of the passage set was computed.
    pub query_scorings: usize,
    pub iterations: Vec<IterationRecord>,
    pub utilized: BTreeSet<usize>,
    pub stop: StopReason,
    /// Sentences with their reference marks.
    pub text: String,
}

/// `sentence [a] [b]` with 1-based ordinals.
pub fn mark_sentence(sentence: &str, selected: &[usize]) -> String {
    let mut out = sentence.to_string();
    for s in selected {
        out.push_str(&format!(" [{}]", s + 1));
    }
    out
}

impl GenerationTrace {
    /// Sentences without marks, joined by spaces.
    pub fn plain_text(&self) -> String {
        self.iterations
            .iter()
            .map(|it| it.sentence.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks the structural guarantees of a finished trace.
    pub fn check_invariants(&self, max_utilized: usize) -> std::result::Result<(), String> {
        let k = self.passages.len();
        let mut union = BTreeSet::new();
        let mut pieces = Vec::new();
        for (i, it) in self.iterations.iter().enumerate() {
            if it.iteration != i {
                return Err(format!("iteration {i} recorded as {}", it.iteration));
            }
            if it.combined.len() != k {
                return Err(format!("iteration {i} scored {} passages, expected {k}", it.combined.len()));
            }
            if it.selected.is_empty() || it.selected.iter().any(|&s| s >= k) {
                return Err(format!("iteration {i} selected {:?}", it.selected));
            }
            union.extend(it.selected.iter().copied());
            pieces.push(mark_sentence(&it.sentence, &it.selected));
        }
        if union != self.utilized {
            return Err(format!("utilized {:?} != union of selections {union:?}", self.utilized));
        }
        if self.utilized.len() > max_utilized {
            return Err(format!("{} passages utilized", self.utilized.len()));
        }
        if pieces.join(" ") != self.text {
            return Err("final text is not the marked sentences in order".into());
        }
        if self.query_scorings != 1 {
            return Err(format!("query relevance computed {} times", self.query_scorings));
        }
        Ok(())
    }
}

/// Retrieves once, scores the query once, then selects passages and decodes
/// one sentence per iteration until a stop rule fires.
pub fn generate<M: GenerationModel + ?Sized>(
    query: &str,
    index: &InvertedIndex,
    model: &M,
    cfg: &EngineConfig,
) -> Result<GenerationTrace> {
    cfg.validate()?;
    let hits = index.search(query, cfg.k);
    if hits.is_empty() {
        return Err(EngineError::NoPassages(query.to_string()));
    }
    let encoded: Vec<EncodedSequence> = hits
        .iter()
        .map(|h| model.encode_passage(query, &h.passage.text))
        .collect::<Result<_>>()?;
    let pooled: Vec<Vec<f64>> = encoded.iter().map(|e| e.pooled.clone()).collect();

    let mut score_err = None;
    let (raw_query, _) = query_relevance(&pooled, |h| match model.query_score(h) {
        Ok(v) => v,
        Err(e) => {
            score_err.get_or_insert(e);
            f64::NAN
        }
    })?;
    if let Some(e) = score_err {
        return Err(e);
    }
    let query_scorings = 1;
    let query_only = RelevanceScores::new(raw_query, None)?;
    let static_top: Vec<usize> = rank_candidates(&query_only.prob_query, &BTreeSet::new())
        .into_iter()
        .take(cfg.max_utilized)
        .collect();

    let ab = cfg.ablation;
    let mut sentences: Vec<String> = Vec::new();
    let mut iterations = Vec::new();
    let mut utilized = BTreeSet::new();
    let mut marked = Vec::new();
    let mut stop = StopReason::MaxIterations;

    for iteration in 0..cfg.max_iterations {
        let started = Instant::now();
        if ab.no_ds {
            if iteration >= cfg.max_utilized {
                stop = StopReason::Utilized;
                break;
            }
        } else if utilized.len() >= cfg.max_utilized {
            stop = StopReason::Utilized;
            break;
        }
        let context = sentences.join(" ");
        let score_context = !context.is_empty() && !ab.no_rp && !ab.no_ds;
        let ctx_enc = if ab.no_pg && !score_context {
            None
        } else {
            Some(model.encode_context(&context)?)
        };

        let scores = match (&ctx_enc, score_context) {
            (Some(c), true) => {
                let (raw_ctx, _) = context_relevance(&pooled, &c.pooled)?;
                RelevanceScores::new(query_only.raw_query.clone(), Some(raw_ctx))?
            }
            _ => query_only.clone(),
        };
        let combined = combined_relevance(&scores, !ab.no_rp);

        let selected = if ab.no_ds {
            static_top.clone()
        } else {
            match select_subset(&combined, &utilized, cfg.gamma) {
                Ok(mut s) => {
                    s.truncate(cfg.max_utilized - utilized.len());
                    s
                }
                Err(SelectionError::Exhausted) => {
                    stop = StopReason::Exhausted;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        };

        let chosen: Vec<&EncodedSequence> = selected.iter().map(|&i| &encoded[i]).collect();
        let memory_ctx = if ab.no_pg { None } else { ctx_enc.as_ref() };
        let memory = concat_memory(memory_ctx, &chosen)?;
        let decoded = model.decode_sentence(&memory, cfg.decode, cfg.max_sentence_tokens)?;
        let sentence = decoded.text.trim().to_string();
        if sentence.is_empty() {
            stop = StopReason::EmptySentence;
            break;
        }
        let pooled_attention = match &decoded.record {
            Some(r) if r.steps() > 0 => Some(extract_passage_attention(r)?),
            _ => None,
        };
        utilized.extend(selected.iter().copied());
        marked.push(mark_sentence(&sentence, &selected));
        sentences.push(sentence.clone());
        iterations.push(IterationRecord {
            iteration,
            combined,
            selected,
            sentence,
            pooled_attention,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(GenerationTrace {
        query: query.to_string(),
        passages: hits
            .into_iter()
            .map(|h| RetrievedPassage {
                id: h.passage.id,
                text: h.passage.text,
                bm25: h.score,
            })
            .collect(),
        prob_query: query_only.prob_query,
        query_scorings,
        iterations,
        utilized,
        stop,
        text: marked.join(" "),
    })
}
