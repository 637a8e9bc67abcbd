//! Desk-scale transfer benchmark on the synthetic dictionary task.
//!
//! Runs baseline, cd and cd-memory over several seeds and reports per-run
//! and per-mode target scores. Everything is derived from one master seed,
//! so two runs with the same seed produce identical reports.

use serde::{Deserialize, Serialize};

use crate::agent::{run_source_training, run_target_eval, Mode, Scorer, TrainConfig, UpdateSource};
use crate::dataio::{dictionary_teacher, generate_dictionary_task};
use crate::distill::{TeacherParams, UpdateCorpus};
use crate::error::Result;
use crate::hash::derive_seed;
use crate::oracle::{batch_generate_updates, BatchOptions};
use crate::tokenizer::Vocab;

/// Benchmark configuration; defaults match the acceptance setup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchConfig {
    pub n_symbols: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub seeds: usize,
    pub master_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_symbols: 10,
            n_source: 50,
            n_target: 50,
            seeds: 5,
            master_seed: 7,
        }
    }
}

/// One (mode, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchRow {
    pub mode: Mode,
    pub seed_index: usize,
    pub target_score: f64,
    pub source_validation: f64,
    pub epochs_run: usize,
    pub memory_size: usize,
}

/// Per-mode aggregate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModeSummary {
    pub mode: Mode,
    pub mean_target_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub chance_level: f64,
    pub rows: Vec<BenchRow>,
    pub summary: Vec<ModeSummary>,
}

impl BenchReport {
    pub fn mean_for(&self, mode: Mode) -> f64 {
        self.summary
            .iter()
            .find(|s| s.mode == mode)
            .map(|s| s.mean_target_score)
            .unwrap_or(f64::NAN)
    }
}

/// Run the full benchmark: per seed, generate the task and teacher corpus,
/// then train and zero-shot evaluate each mode.
pub fn run_synthetic_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let modes = [Mode::Baseline, Mode::Cd, Mode::CdMemory];
    let mut rows = Vec::with_capacity(cfg.seeds * modes.len());
    for s in 0..cfg.seeds {
        let task_seed = derive_seed(cfg.master_seed, &format!("bench-task-{s}"));
        let task = generate_dictionary_task(cfg.n_symbols, cfg.n_source, cfg.n_target, task_seed)?;
        task.audit()?;

        let teacher = dictionary_teacher();
        let mut scratch = Vocab::new();
        let batch = batch_generate_updates(
            &task.source,
            &teacher,
            &BatchOptions {
                params: TeacherParams::deterministic(),
                emit_meta: false,
                fixed_timestamp: Some(0),
            },
            &mut scratch,
        );
        let corpus = UpdateCorpus::from_records(batch.updates);

        for mode in modes {
            let train_cfg = TrainConfig {
                mode,
                master_seed: derive_seed(cfg.master_seed, &format!("bench-train-{s}")),
                embed_seed: derive_seed(cfg.master_seed, &format!("bench-embed-{s}")),
                scorer: Scorer::ExactMatch,
                ..TrainConfig::default()
            };
            let updates = match mode {
                Mode::Baseline => UpdateSource::None,
                _ => UpdateSource::Corpus(&corpus),
            };
            let mut arts = run_source_training(&task.source, &updates, &train_cfg)?;
            let report = run_target_eval(
                &task.target,
                &arts.solver,
                arts.store.as_ref(),
                &arts.embedder,
                &mut arts.vocab,
                &train_cfg,
            )?;
            rows.push(BenchRow {
                mode,
                seed_index: s,
                target_score: report.mean_score,
                source_validation: arts
                    .history
                    .last()
                    .map(|h| h.validation_score)
                    .unwrap_or(0.0),
                epochs_run: arts.epochs_run,
                memory_size: arts.store.as_ref().map_or(0, |st| st.len()),
            });
        }
    }

    let summary = modes
        .iter()
        .map(|&mode| {
            let scores: Vec<f64> = rows
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.target_score)
                .collect();
            ModeSummary {
                mode,
                mean_target_score: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            }
        })
        .collect();

    Ok(BenchReport {
        config: cfg.clone(),
        chance_level: 1.0 / cfg.n_symbols as f64,
        rows,
        summary,
    })
}
