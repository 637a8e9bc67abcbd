//! Config file handling and the reproducibility manifest.
//!
//! Settings resolve in order: built-in defaults, then the TOML config file,
//! then command-line flags (flags win). The manifest echoes the resolved
//! configuration, seeds, module versions and input digests; it carries no
//! wall-clock data, so identical runs write identical manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cdmem::agent::{Mode, Scorer, TrainConfig};
use cdmem::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Optional settings loadable from a TOML file.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub embed_seed: Option<u64>,
    pub dim: Option<usize>,
    pub k_q: Option<usize>,
    pub k_pca: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub validation_fraction: Option<f64>,
    pub gen_max_tokens: Option<usize>,
    pub alpha: Option<f64>,
    pub learning_rate: Option<f64>,
    pub cooc_window: Option<usize>,
    pub tail_len: Option<usize>,
    pub head_weight: Option<f64>,
    pub tail_weight: Option<f64>,
    pub scorer: Option<String>,
    pub sample_with_replacement: Option<bool>,
    pub include_context_in_injection: Option<bool>,
    pub posterior_filter_threshold: Option<f64>,
    pub oracle: Option<String>,
    pub oracle_temperature: Option<f64>,
    pub oracle_max_tokens: Option<usize>,
    pub per_task: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        toml::from_str(&text).map_err(|e| {
            Error::Config(format!("invalid config file {}: {e}", path.display()))
        })
    }
}

/// Flag-level overrides shared by train/eval/bench.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainOpts {
    /// Master rng seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hash-embedder seed.
    #[arg(long)]
    pub embed_seed: Option<u64>,
    /// Embedding dimension d.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Queries per retrieval batch.
    #[arg(long)]
    pub k_q: Option<usize>,
    /// PCA components per candidate set.
    #[arg(long)]
    pub k_pca: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Plateau patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Minimum validation improvement that resets the plateau counter.
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Greedy decoding budget.
    #[arg(long)]
    pub gen_max_tokens: Option<usize>,
    /// Trigram smoothing.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Co-occurrence window for the per-epoch embedding refresh.
    #[arg(long)]
    pub cooc_window: Option<usize>,
    /// Tail segment length of the weighted loss.
    #[arg(long)]
    pub tail_len: Option<usize>,
    #[arg(long)]
    pub head_weight: Option<f64>,
    #[arg(long)]
    pub tail_weight: Option<f64>,
    /// Verifier: exact-match | token-f1.
    #[arg(long)]
    pub scorer: Option<String>,
    /// Train-mode query sampling with replacement.
    #[arg(long)]
    pub sample_with_replacement: bool,
    /// Ablation: inject record contexts alongside updates.
    #[arg(long)]
    pub include_context_in_injection: bool,
}

/// Resolve defaults, file and flags into the engine configuration.
pub fn resolve_train_config(
    mode: Option<&str>,
    file: &FileConfig,
    opts: &TrainOpts,
) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let mode = match mode.or(file.mode.as_deref()) {
        Some(m) => m.parse::<Mode>()?,
        None => d.mode,
    };
    let scorer = match opts.scorer.as_deref().or(file.scorer.as_deref()) {
        Some(s) => s.parse::<Scorer>()?,
        None => d.scorer,
    };
    let cfg = TrainConfig {
        mode,
        scorer,
        dim: opts.dim.or(file.dim).unwrap_or(d.dim),
        embed_seed: opts.embed_seed.or(file.embed_seed).unwrap_or(d.embed_seed),
        master_seed: opts.seed.or(file.seed).unwrap_or(d.master_seed),
        max_epochs: opts.max_epochs.or(file.max_epochs).unwrap_or(d.max_epochs),
        patience: opts.patience.or(file.patience).unwrap_or(d.patience),
        min_delta: opts.min_delta.or(file.min_delta).unwrap_or(d.min_delta),
        validation_fraction: opts
            .validation_fraction
            .or(file.validation_fraction)
            .unwrap_or(d.validation_fraction),
        k_q: opts.k_q.or(file.k_q).unwrap_or(d.k_q),
        k_pca: opts.k_pca.or(file.k_pca).unwrap_or(d.k_pca),
        sample_with_replacement: opts.sample_with_replacement
            || file.sample_with_replacement.unwrap_or(false),
        gen_max_tokens: opts
            .gen_max_tokens
            .or(file.gen_max_tokens)
            .unwrap_or(d.gen_max_tokens),
        alpha: opts.alpha.or(file.alpha).unwrap_or(d.alpha),
        learning_rate: opts
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(d.learning_rate),
        cooc_window: opts.cooc_window.or(file.cooc_window).unwrap_or(d.cooc_window),
        tail_len: opts.tail_len.or(file.tail_len).unwrap_or(d.tail_len),
        head_weight: opts.head_weight.or(file.head_weight).unwrap_or(d.head_weight),
        tail_weight: opts.tail_weight.or(file.tail_weight).unwrap_or(d.tail_weight),
        include_context_in_injection: opts.include_context_in_injection
            || file.include_context_in_injection.unwrap_or(false),
    };
    validate_train_config(&cfg)?;
    Ok(cfg)
}

fn validate_train_config(cfg: &TrainConfig) -> Result<()> {
    if cfg.k_q == 0 || cfg.k_q > cfg.k_pca + 1 {
        return Err(Error::Config(format!(
            "k_q must satisfy 1 <= k_q <= k_pca + 1 (got k_q={}, k_pca={})",
            cfg.k_q, cfg.k_pca
        )));
    }
    if cfg.k_pca > cfg.dim {
        return Err(Error::Config(format!(
            "k_pca ({}) cannot exceed the embedding dimension ({})",
            cfg.k_pca, cfg.dim
        )));
    }
    if cfg.dim < 2 {
        return Err(Error::Config("dim must be at least 2".into()));
    }
    if cfg.alpha <= 0.0 {
        return Err(Error::Config("alpha must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config(
            "validation_fraction must lie in [0, 1)".into(),
        ));
    }
    Ok(())
}

/// Reproducibility manifest written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub versions: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, config: impl Serialize) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("cdmem".into(), cdmem_version());
        versions.insert("cdmem-cli".into(), env!("CARGO_PKG_VERSION").into());
        Manifest {
            command: command.to_string(),
            versions,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        let mut h = Sha256::new();
        h.update(&bytes);
        let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn write(&self, outdir: &Path) -> Result<()> {
        fs::create_dir_all(outdir)?;
        let path = outdir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn cdmem_version() -> String {
    // the library crate's version travels with this binary's lockfile
    env!("CARGO_PKG_VERSION").to_string()
}

/// Standard artifact filenames inside a run directory.
pub struct ArtifactPaths {
    pub solver: PathBuf,
    pub memory: PathBuf,
    pub table: PathBuf,
    pub dict: PathBuf,
    pub history: PathBuf,
}

impl ArtifactPaths {
    pub fn in_dir(dir: &Path) -> Self {
        ArtifactPaths {
            solver: dir.join("solver.jsonl"),
            memory: dir.join("memory.jsonl"),
            table: dir.join("table.cdem"),
            dict: dir.join("dict.tsv"),
            history: dir.join("history.jsonl"),
        }
    }
}
