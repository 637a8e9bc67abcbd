//! Contrastive distillation: prior/posterior rollout sampling around
//! evidence, recursive meta-sampling, training-target construction, the
//! segment-weighted loss, and a mutual-information diagnostic.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::oracle::{OracleRequest, TeacherOracle};
use crate::scalar::{sc, Scalar};
use crate::tokenizer::{tokenize_str, TokenSequence, Vocab};

/// Fixed separator between update and proposed target.
pub const ANSWER_MARKER: &str = "Answer:";

/// Tail segment length of the weighted loss split.
pub const TAIL_LEN: usize = 5;

/// Segment weights: the tail (answer span) dominates.
pub const HEAD_WEIGHT: f64 = 0.1;
pub const TAIL_WEIGHT: f64 = 0.9;

/// Sampling parameters for teacher calls.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TeacherParams {
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for TeacherParams {
    fn default() -> Self {
        TeacherParams {
            max_tokens: 128,
            temperature: 0.7,
        }
    }
}

impl TeacherParams {
    /// Deterministic variant used with mocks.
    pub fn deterministic() -> Self {
        TeacherParams {
            max_tokens: 128,
            temperature: 0.0,
        }
    }
}

/// Render the teacher "why" prompt. The question and answer lines are
/// omitted when absent, which covers the prior prompt (no answer), the
/// posterior prompt (with answer), and the meta prompt (pair only).
pub fn render_teacher_prompt(
    context: &str,
    question: Option<&str>,
    answer: Option<&str>,
) -> String {
    let mut s = format!("Context: {context}\n");
    if let Some(q) = question {
        s.push_str(&format!("Question: {q}\n"));
    }
    if let Some(a) = answer {
        s.push_str(&format!("Answer: {a}\n"));
    }
    s.push_str("Why?");
    s
}

/// One rollout from the teacher conditioned on (context, question) and, when
/// non-empty, an answer. Empty answer renders the prior template.
pub fn contrastive_distill(
    oracle: &dyn TeacherOracle,
    context: &TokenSequence,
    question: &TokenSequence,
    answer: &TokenSequence,
    params: &TeacherParams,
    vocab: &mut Vocab,
) -> Result<TokenSequence> {
    if question.is_empty() {
        return Err(Error::EmptyInput("contrastive_distill needs a question"));
    }
    let prompt = render_teacher_prompt(
        &context.text,
        Some(&question.text),
        if answer.is_empty() {
            None
        } else {
            Some(&answer.text)
        },
    );
    let completion = oracle.complete(&OracleRequest {
        prompt,
        max_tokens: params.max_tokens,
        temperature: params.temperature,
        oracle_id: oracle.id().to_string(),
    })?;
    Ok(TokenSequence::new(&completion, vocab))
}

/// A (prior, posterior) rollout pair around a piece of evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdatePair {
    pub prior: TokenSequence,
    pub posterior: TokenSequence,
    pub source_task: TokenSequence,
    pub evidence: TokenSequence,
}

/// Emit an update pair: the prior conditions on (x, ŷ), the posterior on
/// (x, y). The prior prompt is rendered without the evidence, and the
/// pipeline asserts that no evidence token that is novel with respect to
/// (x, ŷ) leaks into it.
#[allow(clippy::too_many_arguments)]
pub fn bayesian_contrastive_distill(
    oracle: &dyn TeacherOracle,
    context: &TokenSequence,
    question: &TokenSequence,
    y_hat: &TokenSequence,
    y: &TokenSequence,
    params: &TeacherParams,
    vocab: &mut Vocab,
) -> Result<UpdatePair> {
    if y.is_empty() {
        return Err(Error::EmptyInput(
            "bayesian contrastive distillation needs evidence y",
        ));
    }
    let prior_prompt = render_teacher_prompt(
        &context.text,
        Some(&question.text),
        if y_hat.is_empty() {
            None
        } else {
            Some(&y_hat.text)
        },
    );
    if y_hat.text != y.text {
        assert_no_evidence_leak(&prior_prompt, context, question, y_hat, y);
    }
    let prior = contrastive_distill(oracle, context, question, y_hat, params, vocab)?;
    let posterior = contrastive_distill(oracle, context, question, y, params, vocab)?;
    Ok(UpdatePair {
        prior,
        posterior,
        source_task: context.concat(question),
        evidence: y.clone(),
    })
}

/// Evidence tokens that do not already occur in the task or the model's own
/// prediction must be absent from the prior prompt.
fn assert_no_evidence_leak(
    prior_prompt: &str,
    context: &TokenSequence,
    question: &TokenSequence,
    y_hat: &TokenSequence,
    y: &TokenSequence,
) {
    let mut visible: Vec<String> = tokenize_str(&context.text);
    visible.extend(tokenize_str(&question.text));
    visible.extend(tokenize_str(&y_hat.text));
    let prompt_tokens = tokenize_str(prior_prompt);
    for tok in tokenize_str(&y.text) {
        if !visible.contains(&tok) {
            assert!(
                !prompt_tokens.contains(&tok),
                "evidence token {tok:?} leaked into the prior prompt"
            );
        }
    }
}

/// One further rollout over the pair itself: context is the prior, the
/// posterior stands in the answer slot. The result is a shorter self-learned
/// sequence flagged for memory storage as a compressed update.
pub fn meta_distill(
    oracle: &dyn TeacherOracle,
    pair: &UpdatePair,
    params: &TeacherParams,
    vocab: &mut Vocab,
) -> Result<TokenSequence> {
    let prompt = render_teacher_prompt(&pair.prior.text, None, Some(&pair.posterior.text));
    let completion = oracle.complete(&OracleRequest {
        prompt,
        max_tokens: params.max_tokens,
        temperature: params.temperature,
        oracle_id: oracle.id().to_string(),
    })?;
    Ok(TokenSequence::new(&completion, vocab))
}

/// Training target `u ⊕ "Answer:" ⊕ y` with its head/tail split.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationTarget {
    pub full_sequence: TokenSequence,
    split: usize,
}

impl DistillationTarget {
    /// All tokens up to the 5th-from-last; empty for short sequences.
    pub fn head(&self) -> &[u32] {
        &self.full_sequence.tokens[..self.split]
    }

    /// The last (at most) 5 tokens; the whole sequence when short.
    pub fn tail(&self) -> &[u32] {
        &self.full_sequence.tokens[self.split..]
    }

    /// Per-token weights matching the segment loss: head positions weighted
    /// 0.1, tail positions 0.9.
    pub fn per_token_weights<S: Scalar>(&self) -> Vec<S> {
        segment_weights(self.full_sequence.len(), TAIL_LEN)
    }
}

/// Per-token segment weights for an arbitrary sequence length.
pub fn segment_weights<S: Scalar>(len: usize, tail_len: usize) -> Vec<S> {
    let split = len.saturating_sub(tail_len);
    (0..len)
        .map(|i| {
            if i < split {
                sc(HEAD_WEIGHT)
            } else {
                sc(TAIL_WEIGHT)
            }
        })
        .collect()
}

/// Assemble the distillation target for update `u` and proposed target `y`.
pub fn build_target(
    u: &TokenSequence,
    y: &TokenSequence,
    vocab: &mut Vocab,
) -> Result<DistillationTarget> {
    if y.is_empty() {
        return Err(Error::EmptyInput("build_target needs a non-empty target y"));
    }
    let marker = TokenSequence::new(ANSWER_MARKER, vocab);
    let full_sequence = u.concat(&marker).concat(y);
    let split = full_sequence.len().saturating_sub(TAIL_LEN);
    Ok(DistillationTarget {
        full_sequence,
        split,
    })
}

/// Segment-weighted loss: `0.1 · mean(head) + 0.9 · mean(tail)` with the
/// split five tokens from the end. Sequences of five tokens or fewer put
/// everything in the tail and the head term is zero.
pub fn weighted_loss<S: Scalar>(per_token_losses: &[S]) -> Result<S> {
    weighted_loss_with(per_token_losses, TAIL_LEN, sc(HEAD_WEIGHT), sc(TAIL_WEIGHT))
}

/// Weighted loss with configurable split and weights.
pub fn weighted_loss_with<S: Scalar>(
    per_token_losses: &[S],
    tail_len: usize,
    w_head: S,
    w_tail: S,
) -> Result<S> {
    if per_token_losses.is_empty() {
        return Err(Error::EmptyInput("weighted loss needs at least one token"));
    }
    let split = per_token_losses.len().saturating_sub(tail_len);
    let mean = |xs: &[S]| {
        let mut acc = S::zero();
        for x in xs {
            acc += *x;
        }
        acc / S::from_usize(xs.len()).expect("length fits scalar")
    };
    let head_term = if split > 0 {
        w_head * mean(&per_token_losses[..split])
    } else {
        S::zero()
    };
    Ok(head_term + w_tail * mean(&per_token_losses[split..]))
}

/* --------------------- mutual-information diagnostic ------------------- */

/// Default cluster count for hashed token bags.
pub const MI_CLUSTERS: u32 = 64;

/// Default verifier-score bucket count.
pub const MI_BUCKETS: u32 = 4;

/// Cluster an update by its token bag (order-insensitive hash).
pub fn cluster_token_bag(seq: &TokenSequence, n_clusters: u32) -> u32 {
    let mut ids = seq.tokens.clone();
    ids.sort_unstable();
    let mut bytes = Vec::with_capacity(ids.len() * 4);
    for id in ids {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    (fnv1a64(&bytes) % n_clusters as u64) as u32
}

/// Bucket a verifier score in [0,1] into `n_buckets` bins.
pub fn bucket_score(score: f64, n_buckets: u32) -> u32 {
    let b = (score.clamp(0.0, 1.0) * n_buckets as f64).floor() as u32;
    b.min(n_buckets - 1)
}

/// Plug-in mutual information (bits) of the empirical joint histogram.
pub fn estimate_mutual_information(pairs: &[(u32, u32)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::EmptyInput(
            "mutual information needs at least two samples",
        ));
    }
    let n = pairs.len() as f64;
    let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
    let mut px: HashMap<u32, f64> = HashMap::new();
    let mut py: HashMap<u32, f64> = HashMap::new();
    for &(x, y) in pairs {
        *joint.entry((x, y)).or_default() += 1.0;
        *px.entry(x).or_default() += 1.0;
        *py.entry(y).or_default() += 1.0;
    }
    if px.len() < 2 || py.len() < 2 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c / n;
        let p_x = px[&x] / n;
        let p_y = py[&y] / n;
        mi += pxy * (pxy / (p_x * p_y)).log2();
    }
    Ok(mi.max(0.0))
}

/* --------------------------- corpus records ---------------------------- */

/// Which rollout a corpus line holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Prior,
    Posterior,
    Meta,
}

/// One teacher update, one line of the update corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UpdateRecord {
    /// Corpus ordinal; doubles as the memory ordinal when indexed.
    pub t: u64,
    /// Index of the originating datapoint in its dataset.
    pub datapoint: usize,
    pub task_id: String,
    pub x: String,
    pub y_hat: String,
    pub y: String,
    pub kind: UpdateKind,
    pub update: String,
    pub oracle_id: String,
    pub timestamp: u64,
}

/// One emitted pair, one line of the pair corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UpdatePairRecord {
    pub x: String,
    pub y_hat: String,
    pub y: String,
    pub u_prior: String,
    pub u_posterior: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_meta: Option<String>,
    pub oracle_id: String,
    pub timestamp: u64,
}

pub fn save_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Update corpus grouped by datapoint for per-episode sampling.
#[derive(Debug, Clone, Default)]
pub struct UpdateCorpus {
    records: Vec<UpdateRecord>,
    by_datapoint: HashMap<usize, Vec<usize>>,
}

impl UpdateCorpus {
    pub fn from_records(records: Vec<UpdateRecord>) -> Self {
        let mut by_datapoint: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            by_datapoint.entry(r.datapoint).or_default().push(i);
        }
        UpdateCorpus {
            records,
            by_datapoint,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_records(load_jsonl(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_jsonl(&self.records, path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[UpdateRecord] {
        &self.records
    }

    /// Uniformly sample one prior/posterior update for a datapoint.
    pub fn sample_for<R: Rng>(&self, datapoint: usize, rng: &mut R) -> Option<&UpdateRecord> {
        let ids: Vec<usize> = self
            .by_datapoint
            .get(&datapoint)?
            .iter()
            .copied()
            .filter(|&i| self.records[i].kind != UpdateKind::Meta)
            .collect();
        if ids.is_empty() {
            return None;
        }
        Some(&self.records[ids[rng.gen_range(0..ids.len())]])
    }

    /// Config hook: retain only datapoints whose posterior update passes a
    /// verifier threshold (divergent teacher updates are a known noise
    /// source; filtering is exposed but off by default).
    pub fn filter_by_posterior(
        self,
        min_score: f64,
        score: impl Fn(&str, &str) -> f64,
    ) -> UpdateCorpus {
        let mut keep_datapoint: HashMap<usize, bool> = HashMap::new();
        for r in &self.records {
            if r.kind == UpdateKind::Posterior {
                let ok = score(&r.update, &r.y) >= min_score;
                let e = keep_datapoint.entry(r.datapoint).or_insert(true);
                *e = *e && ok;
            }
        }
        let records = self
            .records
            .into_iter()
            .filter(|r| *keep_datapoint.get(&r.datapoint).unwrap_or(&true))
            .collect();
        Self::from_records(records)
    }
}
