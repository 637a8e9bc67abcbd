//! Command-line front end: wires datasets, the teacher oracle, training and
//! evaluation into reproducible runs.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::TrainOpts;

#[derive(Debug, Parser)]
#[command(
    name = "cdmem",
    version,
    about = "Self-learning engine: contrastive distillation with episodic vector memory"
)]
pub struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the teacher update corpus (prior + posterior per datapoint).
    GenerateUpdates {
        /// QA dataset: .jsonl file, story-format .txt file, or a directory
        /// of story-format task files.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory (updates.jsonl, pairs.jsonl, manifest.json).
        #[arg(long)]
        outdir: PathBuf,
        /// Oracle: "echo", "dictionary", or an http(s) endpoint URL.
        #[arg(long)]
        oracle: Option<String>,
        /// Also emit the recursive meta update per pair.
        #[arg(long)]
        emit_meta: bool,
        /// Stamp records with a fixed timestamp instead of wall clock.
        #[arg(long)]
        fixed_timestamp: Option<u64>,
        /// Take only the first N datapoints per story-format task file.
        #[arg(long)]
        per_task: Option<usize>,
    },

    /// Index an update corpus into a memory store.
    BuildMemory {
        /// Update corpus written by generate-updates.
        #[arg(long)]
        updates: PathBuf,
        /// Output directory (memory.jsonl, dict.tsv, manifest.json).
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        embed_seed: Option<u64>,
        /// Drop datapoints whose posterior update scores below this token-F1
        /// against the label.
        #[arg(long)]
        posterior_filter_threshold: Option<f64>,
    },

    /// Fine-tune the built-in solver on a source dataset.
    Train {
        /// baseline | cd | cd-memory
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        source: PathBuf,
        /// Update corpus (required for cd and cd-memory).
        #[arg(long)]
        updates: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
        /// Take only the first N datapoints per story-format task file.
        #[arg(long)]
        per_task: Option<usize>,
        #[command(flatten)]
        opts: TrainOpts,
    },

    /// Zero-shot evaluation of trained artifacts on a target dataset.
    Eval {
        /// Directory written by train.
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        /// Take only the first N datapoints per story-format task file.
        #[arg(long)]
        per_task: Option<usize>,
        /// Also measure answer churn under reversed retrieval injection.
        #[arg(long)]
        order_sensitivity: bool,
        #[command(flatten)]
        opts: TrainOpts,
    },

    /// Run baseline vs cd vs cd-memory on the synthetic dictionary task.
    BenchSynthetic {
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n_symbols: usize,
        #[arg(long, default_value_t = 50)]
        n_source: usize,
        #[arg(long, default_value_t = 50)]
        n_target: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },

    /// Print store statistics and run the key audit.
    MemoryInspect {
        #[arg(long)]
        store: PathBuf,
        /// Token dictionary saved alongside the store.
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Embedding table file; a hash table is derived when absent.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        embed_seed: Option<u64>,
    },

    /// Check a file against its format; prints the first violation.
    Validate {
        /// qa | babi | memory | updates | pairs | solver | table | dict | episodes
        #[arg(long)]
        kind: String,
        #[arg(long)]
        path: PathBuf,
    },
}

/// Parse arguments and dispatch; returns the process exit code
/// (0 success, 1 runtime/partial failure, 2 configuration error).
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e @ cdmem::Error::Config(_)) => {
            eprintln!("config error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
