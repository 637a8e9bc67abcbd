//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use cdmem::agent::{
    injection_order_sensitivity, run_source_training, run_target_eval, token_f1, Mode,
    UpdateSource,
};
use cdmem::bench::{run_synthetic_benchmark, BenchConfig};
use cdmem::dataio::{dictionary_teacher, load_babi_dir, load_qa_jsonl, parse_babi, QADatapoint};
use cdmem::distill::{load_jsonl, save_jsonl, TeacherParams, UpdateCorpus};
use cdmem::embedding::{EmbeddingTable, HashEmbedder};
use cdmem::error::{Error, Result};
use cdmem::memory::{MemoryStore, UPDATE_TOKEN_CAP};
use cdmem::oracle::{
    batch_generate_updates, BatchOptions, EchoOracle, HttpTransport, OracleCache, TeacherOracle,
    WireOracle,
};
use cdmem::solver::TrigramSolver;
use cdmem::tokenizer::{tokenize_str, Vocab};
use cdmem::{DefaultEmbedder, DefaultSolver, DefaultStore};

use crate::config::{resolve_train_config, ArtifactPaths, FileConfig, Manifest};
use crate::{Cli, Command};

pub fn dispatch(cli: Cli) -> Result<i32> {
    let file_cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenerateUpdates {
            dataset,
            outdir,
            oracle,
            emit_meta,
            fixed_timestamp,
            per_task,
        } => generate_updates(
            &file_cfg,
            &dataset,
            &outdir,
            oracle.as_deref(),
            emit_meta,
            fixed_timestamp,
            per_task,
        ),
        Command::BuildMemory {
            updates,
            outdir,
            dim,
            embed_seed,
            posterior_filter_threshold,
        } => build_memory(
            &file_cfg,
            &updates,
            &outdir,
            dim,
            embed_seed,
            posterior_filter_threshold,
        ),
        Command::Train {
            mode,
            source,
            updates,
            outdir,
            per_task,
            opts,
        } => train(
            &file_cfg,
            mode.as_deref(),
            &source,
            updates.as_deref(),
            &outdir,
            per_task,
            &opts,
        ),
        Command::Eval {
            artifacts,
            target,
            outdir,
            per_task,
            order_sensitivity,
            opts,
        } => eval(
            &file_cfg,
            &artifacts,
            &target,
            &outdir,
            per_task,
            order_sensitivity,
            &opts,
        ),
        Command::BenchSynthetic {
            outdir,
            seed,
            n_symbols,
            n_source,
            n_target,
            seeds,
        } => bench_synthetic(&outdir, seed, n_symbols, n_source, n_target, seeds),
        Command::MemoryInspect {
            store,
            dict,
            table,
            dim,
            embed_seed,
        } => memory_inspect(
            &file_cfg,
            &store,
            dict.as_deref(),
            table.as_deref(),
            dim,
            embed_seed,
        ),
        Command::Validate { kind, path } => validate(&kind, &path),
    }
}

/// Dataset loader: directory of story-format task files, a single story
/// file, or line-delimited QA records.
fn load_dataset(path: &Path, per_task: Option<usize>) -> Result<Vec<QADatapoint>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    if path.is_dir() {
        return load_babi_dir(path, per_task);
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") => {
            let mut items = parse_babi(path)?;
            if let Some(n) = per_task {
                items.truncate(n);
            }
            Ok(items)
        }
        _ => load_qa_jsonl(path),
    }
}

fn make_oracle(spec: &str, cache_path: Option<PathBuf>) -> Result<Box<dyn TeacherOracle>> {
    match spec {
        "echo" => Ok(Box::new(EchoOracle::new())),
        "dictionary" => Ok(Box::new(dictionary_teacher())),
        url if url.starts_with("http://") || url.starts_with("https://") => {
            let cache = match cache_path {
                Some(p) => OracleCache::open(&p)?,
                None => OracleCache::in_memory(),
            };
            Ok(Box::new(WireOracle::new(
                HttpTransport::new(url),
                "wire",
                cache,
            )))
        }
        other => Err(Error::Config(format!(
            "unknown oracle {other:?} (expected echo | dictionary | http(s) URL)"
        ))),
    }
}

#[derive(serde::Serialize)]
struct GenerateEcho<'a> {
    oracle: &'a str,
    emit_meta: bool,
    fixed_timestamp: Option<u64>,
    temperature: f64,
    max_tokens: usize,
}

#[allow(clippy::too_many_arguments)]
fn generate_updates(
    file_cfg: &FileConfig,
    dataset: &Path,
    outdir: &Path,
    oracle_flag: Option<&str>,
    emit_meta: bool,
    fixed_timestamp: Option<u64>,
    per_task: Option<usize>,
) -> Result<i32> {
    let spec = oracle_flag
        .or(file_cfg.oracle.as_deref())
        .ok_or_else(|| Error::Config("no oracle configured (--oracle or config)".into()))?
        .to_string();
    let data = load_dataset(dataset, per_task.or(file_cfg.per_task))?;
    fs::create_dir_all(outdir)?;
    let oracle = make_oracle(&spec, Some(outdir.join("oracle-cache.jsonl")))?;
    let params = TeacherParams {
        max_tokens: file_cfg.oracle_max_tokens.unwrap_or(128),
        temperature: if spec.starts_with("http") {
            file_cfg.oracle_temperature.unwrap_or(0.7)
        } else {
            0.0
        },
    };
    let mut vocab = Vocab::new();
    let outcome = batch_generate_updates(
        &data,
        oracle.as_ref(),
        &BatchOptions {
            params,
            emit_meta,
            fixed_timestamp,
        },
        &mut vocab,
    );
    save_jsonl(&outcome.updates, &outdir.join("updates.jsonl"))?;
    save_jsonl(&outcome.pairs, &outdir.join("pairs.jsonl"))?;

    let mut manifest = Manifest::new(
        "generate-updates",
        GenerateEcho {
            oracle: &spec,
            emit_meta,
            fixed_timestamp,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        },
    );
    manifest.record_input(dataset).ok();
    manifest.write(outdir)?;

    println!(
        "generated {} updates ({} pairs) from {} datapoints, {} failures",
        outcome.updates.len(),
        outcome.pairs.len(),
        data.len(),
        outcome.failures
    );
    Ok(if outcome.failures > 0 { 1 } else { 0 })
}

fn build_memory(
    file_cfg: &FileConfig,
    updates: &Path,
    outdir: &Path,
    dim: Option<usize>,
    embed_seed: Option<u64>,
    posterior_filter_threshold: Option<f64>,
) -> Result<i32> {
    let dim = dim.or(file_cfg.dim).unwrap_or(64);
    let embed_seed = embed_seed.or(file_cfg.embed_seed).unwrap_or(17);
    let mut corpus = UpdateCorpus::load(updates)?;
    if let Some(threshold) = posterior_filter_threshold.or(file_cfg.posterior_filter_threshold) {
        let before = corpus.len();
        corpus = corpus.filter_by_posterior(threshold, token_f1);
        println!(
            "posterior filter kept {}/{} corpus lines (threshold {threshold})",
            corpus.len(),
            before
        );
    }
    let mut vocab = Vocab::new();
    let embedder = DefaultEmbedder::hash_only(dim, embed_seed, 0);
    let mut store = DefaultStore::new(dim, 0);
    for rec in corpus.records() {
        let ctx = cdmem::TokenSequence::new(&rec.x, &mut vocab);
        store.insert(rec.t, &ctx, &rec.update, &embedder, &mut vocab)?;
    }
    fs::create_dir_all(outdir)?;
    store.save(&outdir.join("memory.jsonl"))?;
    vocab.save(&outdir.join("dict.tsv"))?;

    #[derive(serde::Serialize)]
    struct Echo {
        dim: usize,
        embed_seed: u64,
        posterior_filter_threshold: Option<f64>,
    }
    let mut manifest = Manifest::new(
        "build-memory",
        Echo {
            dim,
            embed_seed,
            posterior_filter_threshold,
        },
    );
    manifest.record_input(updates)?;
    manifest.write(outdir)?;

    println!(
        "indexed {} records (d={dim}, epoch {})",
        store.len(),
        store.embedding_epoch()
    );
    Ok(0)
}

fn train(
    file_cfg: &FileConfig,
    mode: Option<&str>,
    source: &Path,
    updates: Option<&Path>,
    outdir: &Path,
    per_task: Option<usize>,
    opts: &crate::config::TrainOpts,
) -> Result<i32> {
    let cfg = resolve_train_config(mode, file_cfg, opts)?;
    let data = load_dataset(source, per_task.or(file_cfg.per_task))?;

    let corpus = match (cfg.mode, updates) {
        (Mode::Baseline, _) => None,
        (_, Some(path)) => {
            let mut corpus = UpdateCorpus::load(path)?;
            if let Some(threshold) = file_cfg.posterior_filter_threshold {
                corpus = corpus.filter_by_posterior(threshold, token_f1);
            }
            Some(corpus)
        }
        (m, None) => {
            return Err(Error::Config(format!(
                "mode {m} needs --updates (run generate-updates first)"
            )))
        }
    };
    let update_source = match &corpus {
        Some(c) => UpdateSource::Corpus(c),
        None => UpdateSource::None,
    };

    let arts = run_source_training(&data, &update_source, &cfg)?;

    fs::create_dir_all(outdir)?;
    let paths = ArtifactPaths::in_dir(outdir);
    arts.solver.save(&paths.solver)?;
    if let Some(store) = &arts.store {
        store.save(&paths.memory)?;
    }
    arts.embedder.table().save(&paths.table)?;
    arts.vocab.save(&paths.dict)?;
    save_jsonl(&arts.history, &paths.history)?;

    let mut manifest = Manifest::new("train", &cfg);
    manifest.record_input(source)?;
    if let Some(path) = updates {
        manifest.record_input(path)?;
    }
    manifest.write(outdir)?;

    let last = arts.history.last();
    println!(
        "trained {} epochs (plateau: {}), final validation {:.4}, memory {} records",
        arts.epochs_run,
        arts.stopped_at_plateau,
        last.map_or(0.0, |h| h.validation_score),
        arts.store.as_ref().map_or(0, MemoryStore::len),
    );
    Ok(0)
}

#[derive(serde::Serialize)]
struct EvalSummary {
    mean_score: f64,
    n: usize,
    order_sensitivity: Option<f64>,
}

fn eval(
    file_cfg: &FileConfig,
    artifacts: &Path,
    target: &Path,
    outdir: &Path,
    per_task: Option<usize>,
    order_sensitivity: bool,
    opts: &crate::config::TrainOpts,
) -> Result<i32> {
    let cfg = resolve_train_config(None, file_cfg, opts)?;
    let paths = ArtifactPaths::in_dir(artifacts);
    if !paths.solver.exists() {
        return Err(Error::Config(format!(
            "no solver state under {} (run train first)",
            artifacts.display()
        )));
    }
    let solver = DefaultSolver::load(&paths.solver)?;
    let mut vocab = Vocab::load(&paths.dict)?;
    let embedder = DefaultEmbedder::new(
        EmbeddingTable::load(&paths.table)?,
        HashEmbedder::new(cfg.dim, cfg.embed_seed),
    );
    let store = if paths.memory.exists() {
        Some(MemoryStore::load(&paths.memory, &embedder, &mut vocab)?)
    } else {
        None
    };
    let data = load_dataset(target, per_task.or(file_cfg.per_task))?;

    let report = run_target_eval(&data, &solver, store.as_ref(), &embedder, &mut vocab, &cfg)?;
    fs::create_dir_all(outdir)?;
    save_jsonl(&report.records, &outdir.join("report.jsonl"))?;
    save_jsonl(&report.outcomes, &outdir.join("episodes.jsonl"))?;

    let churn = match (&store, order_sensitivity) {
        (Some(store), true) => Some(injection_order_sensitivity(
            &data, &solver, store, &embedder, &mut vocab, &cfg,
        )?),
        _ => None,
    };
    let summary = EvalSummary {
        mean_score: report.mean_score,
        n: report.n,
        order_sensitivity: churn,
    };
    fs::write(
        outdir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    let mut manifest = Manifest::new("eval", &cfg);
    manifest.record_input(target)?;
    manifest.record_input(&paths.solver)?;
    manifest.write(outdir)?;

    println!(
        "evaluated {} examples: mean {} score {:.4}",
        report.n,
        cdmem::agent::VerifierScorer::name(&cfg.scorer),
        report.mean_score
    );
    if let Some(churn) = churn {
        println!("injection-order answer churn: {churn:.4}");
    }
    Ok(0)
}

fn bench_synthetic(
    outdir: &Path,
    seed: u64,
    n_symbols: usize,
    n_source: usize,
    n_target: usize,
    seeds: usize,
) -> Result<i32> {
    let cfg = BenchConfig {
        n_symbols,
        n_source,
        n_target,
        seeds,
        master_seed: seed,
    };
    let report = run_synthetic_benchmark(&cfg)?;

    fs::create_dir_all(outdir)?;
    save_jsonl(&report.rows, &outdir.join("report.jsonl"))?;
    fs::write(
        outdir.join("bench.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Manifest::new("bench-synthetic", &cfg).write(outdir)?;

    println!("synthetic dictionary transfer (chance level {:.2})", report.chance_level);
    println!("{:<12} {:>6} {:>8} {:>8} {:>7}", "mode", "seed", "target", "val", "memory");
    for row in &report.rows {
        println!(
            "{:<12} {:>6} {:>8.3} {:>8.3} {:>7}",
            row.mode.to_string(),
            row.seed_index,
            row.target_score,
            row.source_validation,
            row.memory_size
        );
    }
    println!("{:<12} {:>6} {:>8}", "mode", "", "mean");
    for s in &report.summary {
        println!("{:<12} {:>6} {:>8.3}", s.mode.to_string(), "", s.mean_target_score);
    }
    Ok(0)
}

fn memory_inspect(
    file_cfg: &FileConfig,
    store_path: &Path,
    dict: Option<&Path>,
    table: Option<&Path>,
    dim: Option<usize>,
    embed_seed: Option<u64>,
) -> Result<i32> {
    let embed_seed = embed_seed.or(file_cfg.embed_seed).unwrap_or(17);
    let mut vocab = match dict {
        Some(p) => Vocab::load(p)?,
        None => Vocab::new(),
    };
    let embedder = match table {
        Some(p) => {
            let table = EmbeddingTable::<f64>::load(p)?;
            let fallback = HashEmbedder::new(table.dim(), embed_seed);
            DefaultEmbedder::new(table, fallback)
        }
        None => {
            let dim = dim.or(file_cfg.dim).unwrap_or(64);
            DefaultEmbedder::hash_only(dim, embed_seed, vocab.len())
        }
    };
    let store = MemoryStore::load(store_path, &embedder, &mut vocab)?;
    println!("records:          {}", store.len());
    println!("dimension:        {}", store.dim());
    println!("embedding epoch:  {}", store.embedding_epoch());
    match store.audit(&embedder) {
        Ok(report) => {
            println!("norm audit:       max |1 - ||k||| = {:.3e}", report.max_norm_error);
            println!("recompute audit:  max deviation   = {:.3e}", report.max_key_error);
            println!("audit:            OK");
            Ok(0)
        }
        Err(e) => {
            println!("audit:            FAILED ({e})");
            Ok(1)
        }
    }
}

fn validate(kind: &str, path: &Path) -> Result<i32> {
    let outcome: Result<String> = match kind {
        "qa" => load_qa_jsonl(path).map(|v| format!("{} qa records", v.len())),
        "babi" => parse_babi(path).map(|v| format!("{} datapoints", v.len())),
        "updates" => load_jsonl::<cdmem::distill::UpdateRecord>(path)
            .map(|v| format!("{} update records", v.len())),
        "pairs" => load_jsonl::<cdmem::distill::UpdatePairRecord>(path)
            .map(|v| format!("{} pair records", v.len())),
        "episodes" => load_jsonl::<cdmem::agent::EpisodeOutcome>(path)
            .map(|v| format!("{} episode records", v.len())),
        "solver" => TrigramSolver::<f64>::load(path).map(|s| {
            format!("solver state, digest {}", &s.state_digest()[..12])
        }),
        "table" => EmbeddingTable::<f64>::load(path).map(|t| {
            format!("table V={} d={} epoch={}", t.vocab_size(), t.dim(), t.epoch())
        }),
        "dict" => Vocab::load(path).map(|v| format!("{} tokens", v.len())),
        "memory" => validate_memory_file(path),
        other => {
            return Err(Error::Config(format!(
                "unknown kind {other:?} (expected qa | babi | memory | updates | pairs | solver | table | dict | episodes)"
            )))
        }
    };
    match outcome {
        Ok(desc) => {
            println!("OK: {desc}");
            Ok(0)
        }
        Err(e) => {
            println!("INVALID: {e}");
            Ok(1)
        }
    }
}

/// Structural memory-file check, independent of any embedding table.
fn validate_memory_file(path: &Path) -> Result<String> {
    #[derive(serde::Deserialize)]
    struct Line {
        t: u64,
        #[allow(dead_code)]
        context_text: String,
        update_text: String,
    }
    let text = fs::read_to_string(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut count = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let rec: Line = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let prefix = format!("t={}. ", rec.t);
        if !rec.update_text.starts_with(&prefix) {
            return Err(fail(format!("update must start with {prefix:?}")));
        }
        if !seen.insert(rec.t) {
            return Err(fail(format!("duplicate ordinal t={}", rec.t)));
        }
        let len = tokenize_str(&rec.update_text).len();
        if len > UPDATE_TOKEN_CAP {
            return Err(fail(format!(
                "update has {len} tokens, cap is {UPDATE_TOKEN_CAP}"
            )));
        }
        count += 1;
    }
    Ok(format!("{count} memory records"))
}
