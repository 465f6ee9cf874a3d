use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use itercqr::analysis::{analyze_iteration, trend_report, DiceMode, PlotFormat};
use itercqr::bootstrap::{bootstrap_dataset, ApiClient, ApiConfig, BootstrapCache, BootstrapMode, RewriteRecord};
use itercqr::data::{
    build_instances, generate_toy_corpus, imperfect_rewrites, load_passages, load_sessions, sample_fraction,
    split_sessions, write_jsonl, DatasetVersion, Passage, ReformulationInstance,
};
use itercqr::embedding::{EmbeddingStore, HashingEncoder};
use itercqr::evaluation::{evaluate_run, Slice};
use itercqr::generator::Generator;
use itercqr::orchestrator::{build_vocab, sha256_file, Manifest, Orchestrator, RunInputs};
use itercqr::retrieval::{dense_search, write_run, Bm25Index, RunEntry};
use itercqr::{Error, Result};

use crate::config::{CliConfig, Retriever};
use crate::{Command, ModeArg, SliceArg};

pub fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::SynthData {
            seed,
            sessions,
            turns,
            test_fraction,
            resolve_fraction,
            out,
        } => synth_data(seed, sessions, turns, test_fraction, resolve_fraction, &out),
        Command::Bootstrap {
            mode,
            sessions,
            rewrites,
            cache,
            config,
            out,
        } => bootstrap(mode, &sessions, rewrites.as_deref(), cache.as_deref(), config.as_deref(), &out),
        Command::Embed { passages, dim, out } => embed(&passages, dim, &out),
        Command::Train { config, stop_after } => train(&config, stop_after),
        Command::Retrieve {
            config,
            model_iter,
            retriever,
            k,
            queries_out,
            out,
        } => retrieve(&config, model_iter, retriever, k, queries_out.as_deref(), &out),
        Command::Evaluate {
            run,
            qrels,
            slices,
            sessions,
            out,
        } => evaluate(&run, &qrels, slices, sessions.as_deref(), out.as_deref()),
        Command::Analyze {
            config,
            iters,
            format,
            multiset,
            out,
        } => analyze(&config, &iters, format.into(), multiset, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

const CONFIG_TEMPLATE: &str = r#"name = "toy"

[paths]
train_sessions = "train_sessions.jsonl"
test_sessions = "test_sessions.jsonl"
passages = "passages.jsonl"
bootstrap = "d0.jsonl"
embeddings = "embeddings.bin"
runs_dir = "runs"

[run]
n = 10
beam_width = 10
tau = 1
T = 3
learning_rate = 0.005
seed = 0

[retrieval]
retriever = "dense"
k = 100
"#;

fn synth_data(
    seed: u64,
    sessions: usize,
    turns: usize,
    test_fraction: f64,
    resolve_fraction: f64,
    out: &Path,
) -> Result<Value> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Validation(format!("test_fraction {test_fraction} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&resolve_fraction) {
        return Err(Error::Validation(format!("resolve_fraction {resolve_fraction} outside [0, 1]")));
    }
    let corpus = generate_toy_corpus(seed, sessions, turns, sessions)?;
    let (train, test) = split_sessions(&corpus.sessions, test_fraction, seed);
    let rewrites: Vec<RewriteRecord> = imperfect_rewrites(&corpus, resolve_fraction, seed)
        .into_iter()
        .map(|(instance_id, rewrite)| RewriteRecord { instance_id, rewrite })
        .collect();
    create_dir(out)?;
    write_jsonl(&out.join("sessions.jsonl"), &corpus.sessions)?;
    write_jsonl(&out.join("train_sessions.jsonl"), &train)?;
    write_jsonl(&out.join("test_sessions.jsonl"), &test)?;
    write_jsonl(&out.join("passages.jsonl"), &corpus.passages)?;
    write_jsonl(&out.join("rewrites.jsonl"), &rewrites)?;
    let qrels: String = corpus.qrels.iter().map(|(q, p)| format!("{q} 0 {p} 1\n")).collect();
    write_text(&out.join("qrels.txt"), &qrels)?;
    let config = out.join("itercqr.toml");
    if !config.exists() {
        write_text(&config, CONFIG_TEMPLATE)?;
    }
    Ok(json!({
        "out": display(out),
        "sessions": corpus.sessions.len(),
        "train_sessions": train.len(),
        "test_sessions": test.len(),
        "passages": corpus.passages.len(),
        "qrels": corpus.qrels.len(),
        "rewrites": rewrites.len(),
    }))
}

fn bootstrap(
    mode: ModeArg,
    sessions_path: &Path,
    rewrites: Option<&Path>,
    cache: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    let sessions = load_sessions(sessions_path)?;
    let instances = build_instances(&sessions);
    if instances.is_empty() {
        return Err(Error::Validation(format!("{} holds no turns", sessions_path.display())));
    }
    let d0 = match mode {
        ModeArg::File => {
            let path = rewrites.ok_or_else(|| Error::Validation("--rewrites is required in file mode".into()))?;
            bootstrap_dataset(&instances, &sessions, BootstrapMode::File(path))?
        }
        ModeArg::Api => {
            let api = match config {
                Some(p) => CliConfig::load(p)?.api,
                None => ApiConfig::default(),
            };
            let cache_path = cache.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("cache.jsonl"));
            create_parent(&cache_path)?;
            let client = ApiClient::from_env(api, BootstrapCache::open(&cache_path)?);
            bootstrap_dataset(&instances, &sessions, BootstrapMode::Api(&client))?
        }
    };
    create_parent(out)?;
    d0.persist(out)?;
    Ok(json!({
        "out": display(out),
        "rows": d0.rows.len(),
        "instances": instances.len(),
        "provenance": d0.provenance,
    }))
}

fn embed(passages_path: &Path, dim: usize, out: &Path) -> Result<Value> {
    if dim == 0 {
        return Err(Error::Validation("embedding dimension must be positive".into()));
    }
    let passages = load_passages(passages_path)?;
    let store = EmbeddingStore::build(&passages, &HashingEncoder::new(dim))?;
    create_parent(out)?;
    store.persist(out)?;
    Ok(json!({"out": display(out), "passages": store.len(), "dim": store.dim()}))
}

fn load_store(cfg: &CliConfig, passages: &[Passage], encoder: &HashingEncoder) -> Result<EmbeddingStore> {
    let store = match &cfg.paths.embeddings {
        Some(p) if p.exists() => EmbeddingStore::load(p)?,
        _ => EmbeddingStore::build(passages, encoder)?,
    };
    if store.dim() != cfg.retrieval.embedding_dim {
        return Err(Error::Validation(format!(
            "embedding store has dimension {}, config expects {}",
            store.dim(),
            cfg.retrieval.embedding_dim
        )));
    }
    let ids: HashSet<&str> = store.ids().iter().map(String::as_str).collect();
    if ids.len() != passages.len() || passages.iter().any(|p| !ids.contains(p.passage_id.as_str())) {
        return Err(Error::Validation("embedding store does not match the passage collection".into()));
    }
    Ok(store)
}

fn train(config_path: &Path, stop_after: Option<usize>) -> Result<Value> {
    let cfg = CliConfig::load(config_path)?;
    let sessions = load_sessions(&cfg.paths.train_sessions)?;
    let all = build_instances(&sessions);
    let instances = sample_fraction(&all, cfg.run.data_fraction, cfg.run.seed)?;
    let mut d0 = DatasetVersion::load(&cfg.paths.bootstrap)?;
    if instances.len() < all.len() {
        let keep: HashSet<&str> = instances.iter().map(|i| i.instance_id.as_str()).collect();
        d0.rows.retain(|r| keep.contains(r.instance_id.as_str()));
        log::info!("training on {} of {} instances", instances.len(), all.len());
    }
    let passages = load_passages(&cfg.paths.passages)?;
    let encoder = HashingEncoder::new(cfg.retrieval.embedding_dim);
    let store = load_store(&cfg, &passages, &encoder)?;
    let vocab = build_vocab(&instances, &d0, &passages)?;
    let orchestrator = Orchestrator::new(
        cfg.run.clone(),
        &cfg.paths.runs_dir,
        &cfg.name,
        RunInputs {
            instances: &instances,
            store: &store,
            encoder: &encoder,
            d0: &d0,
            vocab: &vocab,
        },
    )?;
    let outcome = orchestrator.run(stop_after)?;
    let iterations: Vec<Value> = outcome
        .manifest
        .iterations
        .iter()
        .map(|r| {
            json!({
                "t": r.t,
                "phase": r.phase,
                "generated_by": r.generated_by,
                "dataset_top1_reward": r.dataset_top1_reward,
                "final_loss": r.epochs.last().map(|e| e.mean_loss),
                "completed": r.completed,
            })
        })
        .collect();
    Ok(json!({
        "run_dir": display(&orchestrator.run_dir),
        "manifest": display(&orchestrator.manifest_path()),
        "finished": outcome.finished,
        "last_completed": outcome.manifest.last_completed(),
        "final_model": outcome.final_model.as_deref().map(display),
        "iterations": iterations,
    }))
}

/// Model M_t of a finished iteration, after verifying its checksum.
fn load_model(cfg: &CliConfig, t: usize) -> Result<Generator> {
    let run_dir = cfg.run_dir();
    let manifest = Manifest::load(&run_dir.join("manifest.json"))?;
    let record = manifest
        .iterations
        .iter()
        .find(|r| r.t == t && r.completed)
        .ok_or_else(|| Error::Validation(format!("iteration {t} of run {} is not complete", cfg.name)))?;
    let path = run_dir.join(&record.model.path);
    if sha256_file(&path)? != record.model.sha256 {
        return Err(Error::Validation(format!("checksum mismatch for {}", path.display())));
    }
    Generator::load(&path)
}

fn eval_instances(cfg: &CliConfig) -> Result<Vec<ReformulationInstance>> {
    let path = match &cfg.paths.test_sessions {
        Some(p) => p,
        None => {
            log::warn!("no test_sessions configured; using the training sessions");
            &cfg.paths.train_sessions
        }
    };
    let instances = build_instances(&load_sessions(path)?);
    if instances.is_empty() {
        return Err(Error::Validation(format!("{} holds no turns", path.display())));
    }
    Ok(instances)
}

fn reformulate_all(model: &Generator, instances: &[ReformulationInstance], beam_width: usize) -> Result<Vec<String>> {
    instances
        .par_iter()
        .map(|inst| Ok(model.reformulate(&inst.model_input(), beam_width)?.text))
        .collect()
}

fn run_path(out: &Path, retriever: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let file = match out.extension() {
        Some(ext) => format!("{stem}.{retriever}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{retriever}"),
    };
    out.with_file_name(file)
}

fn retrieve(
    config_path: &Path,
    t: usize,
    retriever: Option<Retriever>,
    k: Option<usize>,
    queries_out: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    let cfg = CliConfig::load(config_path)?;
    let retriever = retriever.unwrap_or(cfg.retrieval.retriever);
    let k = k.unwrap_or(cfg.retrieval.k);
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let instances = eval_instances(&cfg)?;
    let passages = load_passages(&cfg.paths.passages)?;
    let model = load_model(&cfg, t)?;
    let queries = reformulate_all(&model, &instances, cfg.retrieval.beam_width)?;
    if let Some(path) = queries_out {
        let records: Vec<RewriteRecord> = instances
            .iter()
            .zip(&queries)
            .map(|(i, q)| RewriteRecord {
                instance_id: i.instance_id.clone(),
                rewrite: q.clone(),
            })
            .collect();
        create_parent(path)?;
        write_jsonl(path, &records)?;
    }
    let kinds: &[&str] = match retriever {
        Retriever::Dense => &["dense"],
        Retriever::Sparse => &["sparse"],
        Retriever::Both => &["dense", "sparse"],
    };
    let mut written = Vec::new();
    for kind in kinds {
        let tag = format!("itercqr-{kind}-m{t}");
        let entries: Vec<RunEntry> = if *kind == "dense" {
            let encoder = HashingEncoder::new(cfg.retrieval.embedding_dim);
            let store = load_store(&cfg, &passages, &encoder)?;
            instances
                .iter()
                .zip(&queries)
                .map(|(i, q)| dense_search(&i.instance_id, q, &store, &encoder, k, &tag))
                .collect::<Result<_>>()?
        } else {
            let index = Bm25Index::build(&passages, cfg.bm25())?;
            instances
                .iter()
                .zip(&queries)
                .map(|(i, q)| index.search(&i.instance_id, q, k, &tag))
                .collect()
        };
        let path = if kinds.len() == 1 { out.to_path_buf() } else { run_path(out, kind) };
        create_parent(&path)?;
        write_run(&entries, &path)?;
        written.push(json!({
            "retriever": kind,
            "out": display(&path),
            "lines": entries.iter().map(|e| e.results.len()).sum::<usize>(),
        }));
    }
    Ok(json!({"model_iter": t, "queries": instances.len(), "k": k, "runs": written}))
}

fn evaluate(run: &Path, qrels: &Path, slices: SliceArg, sessions: Option<&Path>, out: Option<&Path>) -> Result<Value> {
    let selected: Vec<Slice> = match slices {
        SliceArg::Overall => vec![Slice::Overall],
        SliceArg::Label => vec![Slice::Overall, Slice::LabelShifted, Slice::LabelConcentrated],
        SliceArg::Pid => vec![Slice::Overall, Slice::PidShifted, Slice::PidConcentrated],
        SliceArg::All => Slice::ALL.to_vec(),
    };
    let instances = match sessions {
        Some(p) => build_instances(&load_sessions(p)?),
        None if selected.len() > 1 => {
            return Err(Error::Validation("--sessions is required for topic-shift slices".into()));
        }
        None => Vec::new(),
    };
    let reports = evaluate_run(run, qrels, &instances, &selected)?;
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&reports).map_err(|e| Error::Format(e.to_string()))?;
        write_text(path, &(text + "\n"))?;
    }
    let summaries: Vec<Value> = reports
        .iter()
        .map(|r| {
            json!({
                "slice": r.slice,
                "num_queries": r.num_queries,
                "mrr": r.mrr,
                "ndcg@3": r.ndcg_3,
                "recall@10": r.recall_10,
                "recall@100": r.recall_100,
                "excluded_queries": r.excluded_queries,
            })
        })
        .collect();
    Ok(json!({"run": display(run), "reports": summaries, "out": out.map(display)}))
}

fn parse_iters(range: &str) -> Result<Vec<usize>> {
    let bad = || Error::Validation(format!("invalid iteration range {range:?}; expected `a..b` or `t`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    match range.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![num(range)?]),
    }
}

fn analyze(config_path: &Path, iters: &str, format: PlotFormat, multiset: bool, out: &Path) -> Result<Value> {
    let cfg = CliConfig::load(config_path)?;
    let iterations = parse_iters(iters)?;
    let instances = eval_instances(&cfg)?;
    let passages = load_passages(&cfg.paths.passages)?;
    let mode = if multiset { DiceMode::Multiset } else { DiceMode::Set };
    let mut stats = Vec::new();
    for &t in &iterations {
        let model = load_model(&cfg, t)?;
        let queries = reformulate_all(&model, &instances, cfg.retrieval.beam_width)?;
        stats.push(analyze_iteration(&queries, &instances, &passages, t, mode)?);
    }
    create_dir(out)?;
    let files = trend_report(&stats, out, format)?;
    Ok(json!({
        "iterations": iterations,
        "stats": stats,
        "files": files.iter().map(|p| display(p)).collect::<Vec<_>>(),
    }))
}
