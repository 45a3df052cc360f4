use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};

use dkgen::data::{build_all, generate_synthetic, NegativeSource, TrainingSample};
use dkgen::engine::{
    generate, sample_gradients, train, Ablation, DecodeStrategy, DecodedSentence, EngineConfig, EngineError,
    GenerationModel, StopReason, TextModel, TrainConfig,
};
use dkgen::model::{EncodedSequence, Memory, ModelConfig, SegmentLayout, Seq2Seq, SCORE_HEAD_PARAMS};
use dkgen::numerics::{RngState, Tensor};
use dkgen::retriever::{InvertedIndex, Passage};
use dkgen::tokenizer::Vocabulary;

const D: usize = 4;

/// Backend with hand-set pooled vectors and scripted sentences.
struct Rigged {
    pooled: BTreeMap<String, Vec<f64>>,
    context: Vec<f64>,
    script: Vec<&'static str>,
    query_calls: Cell<usize>,
    decoded: Cell<usize>,
    layouts: RefCell<Vec<SegmentLayout>>,
}

impl Rigged {
    fn new(pooled: BTreeMap<String, Vec<f64>>, context: Vec<f64>, script: Vec<&'static str>) -> Self {
        Self {
            pooled,
            context,
            script,
            query_calls: Cell::new(0),
            decoded: Cell::new(0),
            layouts: RefCell::new(Vec::new()),
        }
    }
}

fn encoded(pooled: Vec<f64>) -> EncodedSequence {
    let mut data = vec![0.0; D];
    data.extend(&pooled);
    EncodedSequence {
        hidden: Tensor::matrix(2, D, data).unwrap(),
        pooled,
        keep: vec![true, true],
    }
}

impl GenerationModel for Rigged {
    fn hidden_dim(&self) -> usize {
        D
    }

    fn encode_passage(&self, _query: &str, passage: &str) -> Result<EncodedSequence, EngineError> {
        Ok(encoded(self.pooled[passage].clone()))
    }

    fn encode_context(&self, context: &str) -> Result<EncodedSequence, EngineError> {
        let v = if context.is_empty() { vec![0.0; D] } else { self.context.clone() };
        Ok(encoded(v))
    }

    fn query_score(&self, pooled: &[f64]) -> Result<f64, EngineError> {
        self.query_calls.set(self.query_calls.get() + 1);
        Ok(pooled[0])
    }

    fn decode_sentence(&self, memory: &Memory, _: DecodeStrategy, _: usize) -> Result<DecodedSentence, EngineError> {
        self.layouts.borrow_mut().push(memory.layout.clone());
        let i = self.decoded.get();
        self.decoded.set(i + 1);
        Ok(DecodedSentence {
            text: self.script.get(i).copied().unwrap_or("more text .").to_string(),
            record: None,
        })
    }
}

const QUERY: &str = "zeta";

fn three_passage_index() -> InvertedIndex {
    InvertedIndex::build(&[
        Passage::new("a", "zeta zeta zeta alpha"),
        Passage::new("b", "zeta zeta beta"),
        Passage::new("c", "zeta gamma"),
    ])
    .unwrap()
}

/// Ranks 0 and 1 tie on query relevance; rank 2 wins once a context exists.
fn tie_then_lead(index: &InvertedIndex, script: Vec<&'static str>) -> Rigged {
    let hits = index.search(QUERY, 20);
    assert_eq!(hits.len(), 3);
    let vectors = [vec![5.0, 0.0, 0.0, 0.0], vec![5.0, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]];
    let pooled = hits
        .iter()
        .zip(vectors)
        .map(|(h, v)| (h.passage.text.clone(), v))
        .collect();
    Rigged::new(pooled, vec![0.0, 0.0, 0.0, 8.0], script)
}

#[test]
fn tie_then_single_selection_marks() {
    let index = three_passage_index();
    let model = tie_then_lead(&index, vec!["first sentence .", "second sentence ."]);
    let trace = generate(QUERY, &index, &model, &EngineConfig::default()).unwrap();
    let selections: Vec<Vec<usize>> = trace.iterations.iter().map(|it| it.selected.clone()).collect();
    assert_eq!(selections, vec![vec![0, 1], vec![2]]);
    assert_eq!(trace.text, "first sentence . [1] [2] second sentence . [3]");
    assert_eq!(trace.stop, StopReason::Exhausted);
    assert_eq!(trace.utilized, BTreeSet::from([0, 1, 2]));
    trace.check_invariants(5).unwrap();
    assert_eq!(model.query_calls.get(), trace.passages.len());
    assert_eq!(trace.query_scorings, 1);
}

#[test]
fn memory_layout_follows_the_pg_switch() {
    let index = three_passage_index();
    let model = tie_then_lead(&index, vec!["one .", "two ."]);
    generate(QUERY, &index, &model, &EngineConfig::default()).unwrap();
    for (layout, n) in model.layouts.borrow().iter().zip([2, 1]) {
        assert!(layout.has_context);
        assert_eq!(layout.offsets.len(), n + 2);
    }

    let model = tie_then_lead(&index, vec!["one .", "two ."]);
    let cfg = EngineConfig {
        ablation: Ablation {
            no_pg: true,
            ..Ablation::default()
        },
        ..EngineConfig::default()
    };
    let trace = generate(QUERY, &index, &model, &cfg).unwrap();
    assert_eq!(trace.iterations.len(), 2);
    for (layout, n) in model.layouts.borrow().iter().zip([2, 1]) {
        assert!(!layout.has_context);
        assert_eq!(layout.offsets.len(), n + 1);
        assert!(layout.context_range().is_none());
    }
}

#[test]
fn empty_sentence_stops_without_utilizing() {
    let index = three_passage_index();
    let model = tie_then_lead(&index, vec!["first .", "  "]);
    let trace = generate(QUERY, &index, &model, &EngineConfig::default()).unwrap();
    assert_eq!(trace.stop, StopReason::EmptySentence);
    assert_eq!(trace.iterations.len(), 1);
    assert_eq!(trace.utilized, BTreeSet::from([0, 1]));
    trace.check_invariants(5).unwrap();
}

#[test]
fn no_passages_is_an_error() {
    let index = three_passage_index();
    let model = tie_then_lead(&index, vec![]);
    let err = generate("  ", &index, &model, &EngineConfig::default()).unwrap_err();
    assert!(matches!(err, EngineError::NoPassages(_)));
}

/// Ten passages with distinct relevance, the context favoring the tail.
fn ten_passage_setup() -> (InvertedIndex, Rigged) {
    let corpus: Vec<Passage> = (0..10)
        .map(|i| Passage::new(format!("p{i}"), format!("zeta {}", "filler ".repeat(i + 1))))
        .collect();
    let index = InvertedIndex::build(&corpus).unwrap();
    let hits = index.search(QUERY, 20);
    let pooled = hits
        .iter()
        .enumerate()
        .map(|(r, h)| (h.passage.text.clone(), vec![3.0 - 0.3 * r as f64, 0.0, 0.0, 0.2 * r as f64]))
        .collect();
    (index, Rigged::new(pooled, vec![0.0, 0.0, 0.0, 1.0], vec![]))
}

#[test]
fn utilized_grows_strictly_until_the_cap() {
    let (index, model) = ten_passage_setup();
    let trace = generate(QUERY, &index, &model, &EngineConfig::default()).unwrap();
    assert_eq!(trace.stop, StopReason::Utilized);
    let mut seen = BTreeSet::new();
    let mut last = 0;
    for it in &trace.iterations {
        seen.extend(it.selected.iter().copied());
        assert!(seen.len() > last);
        last = seen.len();
    }
    assert_eq!(trace.utilized.len(), 5);
    trace.check_invariants(5).unwrap();
}

#[test]
fn no_ds_repeats_the_static_selection() {
    let (index, model) = ten_passage_setup();
    let cfg = EngineConfig {
        ablation: Ablation {
            no_ds: true,
            ..Ablation::default()
        },
        ..EngineConfig::default()
    };
    let trace = generate(QUERY, &index, &model, &cfg).unwrap();
    assert_eq!(trace.iterations.len(), 5);
    for it in &trace.iterations {
        assert_eq!(it.selected, vec![0, 1, 2, 3, 4]);
    }
    trace.check_invariants(5).unwrap();
}

#[test]
fn max_iterations_caps_generation() {
    let (index, model) = ten_passage_setup();
    let cfg = EngineConfig {
        max_iterations: 2,
        ..EngineConfig::default()
    };
    let trace = generate(QUERY, &index, &model, &cfg).unwrap();
    assert_eq!(trace.iterations.len(), 2);
    assert_eq!(trace.stop, StopReason::MaxIterations);
}

fn tiny_setup(alpha: f64) -> (TextModel, Vec<TrainingSample>) {
    let set = generate_synthetic(3, &mut RngState::new(5));
    let mut texts: Vec<String> = set.corpus.iter().map(|p| p.text.clone()).collect();
    texts.extend(set.documents.iter().map(|d| d.target.clone()));
    let vocab = Vocabulary::build(&texts, 1000).unwrap();
    let mut cfg = ModelConfig::desk(vocab.len());
    cfg.hidden_dim = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.alpha = alpha;
    let model = Seq2Seq::new(cfg, &mut RngState::new(2)).unwrap();
    let samples = build_all(&set.documents, NegativeSource::Document, &mut RngState::new(3))
        .unwrap()
        .samples;
    (TextModel::new(vocab, model).unwrap(), samples)
}

#[test]
fn alpha_one_leaves_the_score_head_untouched() {
    let (tm, samples) = tiny_setup(1.0);
    let sample = samples.iter().find(|s| !s.context.is_empty()).unwrap();
    let g = sample_gradients(&tm, sample, true).unwrap();
    for name in SCORE_HEAD_PARAMS {
        assert!(g.grads[name].iter().all(|&v| v == 0.0), "{name}");
    }
    assert!(g.grads["lm_head.w"].iter().any(|&v| v != 0.0));

    let (tm, _) = tiny_setup(0.5);
    let g = sample_gradients(&tm, sample, true).unwrap();
    assert!(g.grads["score.w2"].iter().any(|&v| v != 0.0));
}

#[test]
fn same_seed_same_loss_curve() {
    let (tm, samples) = tiny_setup(0.5);
    let cfg = TrainConfig {
        max_steps: Some(6),
        batch_size: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = |mut tm: TextModel| {
        let report = train(&samples, &mut tm, &cfg).unwrap();
        (report.steps, tm)
    };
    let (a, ma) = run(tm.clone());
    let (b, mb) = run(tm.clone());
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let mut fresh = tm;
    let other = TrainConfig { seed: 5, ..cfg.clone() };
    let c = train(&samples, &mut fresh, &other).unwrap().steps;
    assert_ne!(a, c);
}

#[test]
fn training_writes_log_and_checkpoints() {
    let (mut tm, samples) = tiny_setup(0.5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        log_path: Some(dir.path().join("log.jsonl")),
        ..TrainConfig::default()
    };
    let report = train(&samples, &mut tm, &cfg).unwrap();
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), report.steps.len());
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "l_gen", "l_rank", "l_kd", "total"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(report.checkpoints.len(), 3);
    let loaded = TextModel::load(dir.path()).unwrap();
    assert_eq!(loaded.vocab, tm.vocab);
    assert_eq!(loaded.model.config(), tm.model.config());
    for ((a, p), (b, q)) in loaded.model.params().iter().zip(tm.model.params().iter()) {
        assert_eq!(a, b);
        assert_eq!(p.value, q.value, "{a}");
    }
}
