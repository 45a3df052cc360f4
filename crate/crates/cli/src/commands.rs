use std::fs;
use std::path::Path;

use dkgen::data::{build_all, generate_synthetic, load_dataset, write_dataset, DataError, NegativeSource};
use dkgen::engine::{
    generate, measure_latency, Ablation, DecodeStrategy, EngineConfig, EngineError, LatencyMode, TextModel,
    TrainConfig,
};
use dkgen::eval::{evaluate, EvalError, MetricReport};
use dkgen::model::{ModelConfig, ModelError, Seq2Seq};
use dkgen::numerics::RngState;
use dkgen::retriever::{load_corpus, write_corpus, InvertedIndex, RetrieverError};
use dkgen::tokenizer::{TokenizerError, Vocabulary};

use crate::settings::Settings;
use crate::{BenchArgs, Cli, CliError, Command, EngineArgs, GenerateArgs, TrainArgs};

impl From<RetrieverError> for CliError {
    fn from(e: RetrieverError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Io { .. } | ModelError::Checkpoint(_) => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(m) => m.into(),
            EngineError::Tokenizer(t) => t.into(),
            EngineError::Data(d) => d.into(),
            EngineError::Retriever(r) => r.into(),
            EngineError::Io { .. } | EngineError::EmptyDataset | EngineError::NoPassages(_) => {
                CliError::Data(e.to_string())
            }
            EngineError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let seed = settings.pick("seed", cli.seed, 0u64)?;
    match cli.command {
        Command::Index { corpus, out } => {
            let passages = load_corpus(&corpus)?;
            let index = InvertedIndex::build(&passages)?;
            index.save(&out)?;
            println!("indexed {} passages into {}", index.len(), out.display());
        }
        Command::Synth { n, out } => {
            if n == 0 {
                return Err(CliError::Usage("--n must be at least 1".into()));
            }
            create_dir(&out)?;
            let set = generate_synthetic(n, &mut RngState::new(seed));
            write_corpus(&set.corpus, &out.join("corpus.jsonl"))?;
            write_dataset(&set.documents, &out.join("dataset.jsonl"))?;
            println!(
                "wrote {} passages and {} documents to {}",
                set.corpus.len(),
                set.documents.len(),
                out.display()
            );
        }
        Command::Train(args) => cmd_train(&settings, seed, args)?,
        Command::Generate(args) => cmd_generate(&settings, seed, args)?,
        Command::Eval {
            generations,
            targets,
            json,
        } => {
            let cands = read_lines(&generations)?;
            let refs = read_lines(&targets)?;
            if cands.len() != refs.len() {
                return Err(CliError::Data(format!(
                    "{} has {} lines but {} has {}",
                    generations.display(),
                    cands.len(),
                    targets.display(),
                    refs.len()
                )));
            }
            let report = evaluate(&cands, &refs)?;
            println!("{}", MetricReport::table_header());
            println!("{}", report.table_row("dkgen"));
            if let Some(path) = json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
                write_file(&path, &text)?;
            }
        }
        Command::Bench(args) => cmd_bench(&settings, seed, args)?,
    }
    Ok(())
}

fn model_config(settings: &Settings, args: &crate::ModelArgs, vocab_size: usize) -> Result<ModelConfig, CliError> {
    let d = ModelConfig::desk(vocab_size);
    let cfg = ModelConfig {
        vocab_size,
        hidden_dim: settings.pick("hidden_dim", args.hidden_dim, d.hidden_dim)?,
        encoder_layers: settings.pick("encoder_layers", args.encoder_layers, d.encoder_layers)?,
        decoder_layers: settings.pick("decoder_layers", args.decoder_layers, d.decoder_layers)?,
        heads: settings.pick("heads", args.heads, d.heads)?,
        ffn_dim: settings.pick("ffn_dim", args.ffn_dim, d.ffn_dim)?,
        max_positions: settings.pick("max_positions", args.max_positions, d.max_positions)?,
        dropout: settings.pick("dropout", args.dropout, d.dropout)?,
        alpha: settings.pick("alpha", args.alpha, d.alpha)?,
        gamma: d.gamma,
    };
    if cfg.hidden_dim % cfg.heads.max(1) != 0 {
        return Err(CliError::Usage(format!(
            "conflicting keys hidden_dim = {} and heads = {}: hidden_dim must be a multiple of heads",
            cfg.hidden_dim, cfg.heads
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(settings: &Settings, seed: u64, args: TrainArgs) -> Result<(), CliError> {
    let docs = load_dataset(&args.data)?;
    let corpus = match &args.corpus {
        Some(p) => Some(load_corpus(p)?),
        None => None,
    };
    let global = settings.switch("global_negatives", args.global_negatives)?;
    let negatives = match (&corpus, global) {
        (Some(c), true) => NegativeSource::Global(c),
        (None, true) => {
            return Err(CliError::Usage("global_negatives requires --corpus".into()));
        }
        (_, false) => NegativeSource::Document,
    };

    let mut texts: Vec<String> = Vec::new();
    for d in &docs {
        texts.push(d.query.clone());
        texts.push(d.target.clone());
        texts.extend(d.references.iter().map(|r| r.text.clone()));
    }
    if let Some(c) = &corpus {
        texts.extend(c.iter().map(|p| p.text.clone()));
    }
    let max_vocab = settings.pick("max_vocab", args.model.max_vocab, 10_000usize)?;
    let vocab = Vocabulary::build(&texts, max_vocab)?;
    let model_cfg = model_config(settings, &args.model, vocab.len())?;

    let mut rng = RngState::new(seed);
    let outcome = build_all(&docs, negatives, &mut rng.fork())?;
    if outcome.samples.is_empty() {
        return Err(CliError::Data(format!("{}: no usable training tuples", args.data.display())));
    }
    let model = Seq2Seq::new(model_cfg, &mut rng.fork())?;
    let mut tm = TextModel::new(vocab, model)?;

    let clip = settings.pick("clip_norm", args.clip_norm, 5.0f64)?;
    let cfg = TrainConfig {
        epochs: settings.pick("epochs", args.epochs, 5usize)?,
        max_steps: settings.optional("max_steps", args.max_steps)?,
        batch_size: settings.pick("batch_size", args.batch_size, 4usize)?,
        lr: settings.pick("lr", args.lr, 1e-3f64)?,
        weight_decay: settings.pick("weight_decay", args.weight_decay, 0.01f64)?,
        clip_norm: (clip > 0.0).then_some(clip),
        use_kd: !settings.switch("no_di", args.no_di)?,
        dropout: true,
        seed,
        checkpoint_dir: Some(args.out.clone()),
        log_path: Some(args.out.join("train_log.jsonl")),
    };
    create_dir(&args.out)?;
    let report = dkgen::engine::train(&outcome.samples, &mut tm, &cfg)?;
    let last = report.steps.last();
    println!(
        "trained {} steps on {} tuples ({} sentences without support, {} without a negative)",
        report.steps.len(),
        outcome.samples.len(),
        outcome.unsupported,
        outcome.no_negative
    );
    if let Some(r) = last {
        println!(
            "final step: l_gen {:.4} l_rank {:.4} l_kd {:.4} total {:.4}",
            r.l_gen, r.l_rank, r.l_kd, r.total
        );
    }
    println!("model written to {}", args.out.display());
    Ok(())
}

fn engine_config(settings: &Settings, seed: u64, args: &EngineArgs) -> Result<EngineConfig, CliError> {
    let d = EngineConfig::default();
    let beam = settings.pick("beam", args.beam, 0usize)?;
    let cfg = EngineConfig {
        k: settings.pick("k", args.k, d.k)?,
        gamma: settings.pick("gamma", args.gamma, d.gamma)?,
        max_sentence_tokens: settings.pick("max_sentence_tokens", args.max_sentence_tokens, d.max_sentence_tokens)?,
        max_utilized: settings.pick("max_utilized", args.max_utilized, d.max_utilized)?,
        max_iterations: settings.pick("max_iterations", args.max_iterations, d.max_iterations)?,
        decode: if beam == 0 {
            DecodeStrategy::Greedy
        } else {
            DecodeStrategy::Beam { width: beam }
        },
        ablation: Ablation {
            no_ds: settings.switch("no_ds", args.no_ds)?,
            no_pg: settings.switch("no_pg", args.no_pg)?,
            no_rp: settings.switch("no_rp", args.no_rp)?,
        },
        seed,
    };
    if cfg.ablation.no_ds && cfg.ablation.no_rp {
        return Err(CliError::Usage(
            "conflicting keys no_ds and no_rp: without dynamic selection there is no relevance to ablate".into(),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(settings: &Settings, seed: u64, args: GenerateArgs) -> Result<(), CliError> {
    let cfg = engine_config(settings, seed, &args.engine)?;
    let queries = match (&args.query, &args.query_file) {
        (Some(q), None) => vec![q.clone()],
        (None, Some(p)) => read_lines(p)?,
        (Some(_), Some(_)) => return Err(CliError::Usage("conflicting keys query and query_file".into())),
        (None, None) => return Err(CliError::Usage("one of --query or --query-file is required".into())),
    };
    let index = InvertedIndex::load(&args.index)?;
    let tm = TextModel::load(&args.model)?;
    if let Some(out) = &args.out {
        create_dir(out)?;
    }
    for (i, q) in queries.iter().enumerate() {
        let trace = generate(q, &index, &tm, &cfg)?;
        trace
            .check_invariants(cfg.max_utilized)
            .map_err(|e| CliError::Runtime(format!("trace invariant violated for `{q}`: {e}")))?;
        println!("{}", trace.text);
        if let Some(out) = &args.out {
            let path = out.join(format!("trace-{i:04}.json"));
            let text = serde_json::to_string_pretty(&trace).map_err(|e| CliError::Runtime(e.to_string()))?;
            write_file(&path, &text)?;
        }
    }
    Ok(())
}

fn cmd_bench(settings: &Settings, seed: u64, args: BenchArgs) -> Result<(), CliError> {
    let cfg = engine_config(settings, seed, &args.engine)?;
    let queries = read_lines(&args.queries)?;
    if queries.is_empty() {
        return Err(CliError::Data(format!("{}: no queries", args.queries.display())));
    }
    let index = InvertedIndex::load(&args.index)?;
    let tm = TextModel::load(&args.model)?;
    let runs = settings.pick("runs", args.runs, 3usize)?;
    let passages = settings.pick("passages", args.passages, 5usize)?;
    let tokens = settings.pick("tokens", args.tokens, 256usize)?;
    let modes = [LatencyMode::Iterative, LatencyMode::SinglePass { passages, tokens }];
    let reports = measure_latency(&queries, &index, &tm, &cfg, &modes, runs)?;
    println!("{:<12} {:>12}", "mode", "ms/query");
    for r in &reports {
        let name = match r.mode {
            LatencyMode::Iterative => "iterative",
            LatencyMode::SinglePass { .. } => "single-pass",
        };
        println!("{name:<12} {:>12.1}", r.median_ms);
    }
    Ok(())
}
