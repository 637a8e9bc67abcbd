//! Pluggable solver policy plus the built-in trainable toy solver.
//!
//! The built-in solver is a smoothed trigram model with weighted-count
//! updates and greedy decoding. It is deliberately small: exact arithmetic
//! makes the loss/weighting machinery testable, and a neural solver can
//! attach behind the same interface over the wire protocol.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::memory::MemoryStore;
use crate::oracle::{WireRequest, WireResponse};
use crate::retrieval::{select_queries, retrieve_and_assemble, QueryMode, RetrievalBundle, RetrievalConfig};
use crate::scalar::{sc, to_f64, Scalar};
use crate::tokenizer::{TokenSequence, Vocab};

/// Sentinel context id for positions before the sequence start.
pub const BOS: u32 = u32::MAX;

/// Behavioural interface every solver backend satisfies.
pub trait SolverPolicy<S: Scalar> {
    /// Per-token negative log-likelihood of `target` continuing `prefix`.
    fn score(&self, prefix: &[u32], target: &[u32], vocab_size: usize) -> Result<Vec<S>>;

    /// Greedy decoding: repeatedly append the argmax token (ties resolve to
    /// the lowest id) until the stop token or the length cap.
    fn generate(&self, prefix: &[u32], max_tokens: usize, stop_token: Option<u32>) -> Vec<u32>;

    /// Weighted count update; `weights` must match `target` in length.
    fn train_step(&mut self, prefix: &[u32], target: &[u32], weights: &[S]) -> Result<()>;

    /// Maximum input length `n` of the self-I/O constraint.
    fn input_limit(&self) -> usize;
}

/// Emitted updates must be valid solver inputs: every token inside the
/// shared vocabulary and the length within the solver's input limit.
pub fn audit_self_io(seq: &TokenSequence, vocab_size: usize, input_limit: usize) {
    assert!(
        seq.len() <= input_limit,
        "self-I/O violation: update of {} tokens exceeds the input limit {input_limit}",
        seq.len()
    );
    for &id in &seq.tokens {
        assert!(
            (id as usize) < vocab_size,
            "self-I/O violation: token id {id} outside the solver vocabulary ({vocab_size})"
        );
    }
}

/// Add-α smoothed trigram model over the shared token dictionary.
#[derive(Debug, Clone)]
pub struct TrigramSolver<S> {
    counts: HashMap<(u32, u32), HashMap<u32, S>>,
    alpha: S,
    learning_rate: S,
    input_limit: usize,
}

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_LEARNING_RATE: f64 = 1.0;
pub const DEFAULT_INPUT_LIMIT: usize = 1024;

impl<S: Scalar> Default for TrigramSolver<S> {
    fn default() -> Self {
        TrigramSolver::new(sc(DEFAULT_ALPHA), sc(DEFAULT_LEARNING_RATE))
    }
}

impl<S: Scalar> TrigramSolver<S> {
    pub fn new(alpha: S, learning_rate: S) -> Self {
        assert!(alpha > S::zero(), "smoothing must be positive");
        TrigramSolver {
            counts: HashMap::new(),
            alpha,
            learning_rate,
            input_limit: DEFAULT_INPUT_LIMIT,
        }
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn learning_rate(&self) -> S {
        self.learning_rate
    }

    fn context_at(full: &[u32], pos: usize) -> (u32, u32) {
        let get = |i: isize| {
            if i < 0 {
                BOS
            } else {
                full[i as usize]
            }
        };
        (get(pos as isize - 2), get(pos as isize - 1))
    }

    fn bigram_total(&self, ctx: (u32, u32)) -> S {
        self.counts.get(&ctx).map_or(S::zero(), |m| {
            let mut acc = S::zero();
            for v in m.values() {
                acc += *v;
            }
            acc
        })
    }

    /// Smoothed conditional probability of `tok` after `ctx`.
    pub fn prob(&self, ctx: (u32, u32), tok: u32, vocab_size: usize) -> S {
        let c = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(&tok))
            .copied()
            .unwrap_or_else(S::zero);
        let total = self.bigram_total(ctx);
        let v = S::from_usize(vocab_size).expect("vocab fits scalar");
        (c + self.alpha) / (total + self.alpha * v)
    }

    fn argmax(&self, ctx: (u32, u32)) -> u32 {
        // Any positive count beats the smoothed floor shared by unseen
        // tokens, whose tie resolves to id 0; among seen tokens the higher
        // count wins and exact ties go to the lower id.
        let mut best_id = 0u32;
        let mut best_count = S::zero();
        if let Some(m) = self.counts.get(&ctx) {
            for (&tok, &c) in m {
                if c > best_count || (c == best_count && tok < best_id) {
                    best_id = tok;
                    best_count = c;
                }
            }
        }
        best_id
    }

    /// Canonical sorted count lines used by both persistence and hashing.
    fn canonical_lines(&self) -> Vec<CountLine> {
        let mut lines: Vec<CountLine> = self
            .counts
            .iter()
            .flat_map(|(&(t1, t2), m)| {
                m.iter().map(move |(&t3, &w)| CountLine {
                    t1,
                    t2,
                    t3,
                    weight: to_f64(w),
                })
            })
            .collect();
        lines.sort_by_key(|l| (l.t1, l.t2, l.t3));
        lines
    }

    /// Stable digest of the full solver state.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(to_f64(self.alpha).to_le_bytes());
        h.update(to_f64(self.learning_rate).to_le_bytes());
        h.update(self.input_limit.to_le_bytes());
        for line in self.canonical_lines() {
            h.update(line.t1.to_le_bytes());
            h.update(line.t2.to_le_bytes());
            h.update(line.t3.to_le_bytes());
            h.update(line.weight.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Persist as a meta line followed by sorted count lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        let meta = SolverMeta {
            format: SOLVER_FORMAT.to_string(),
            alpha: to_f64(self.alpha),
            learning_rate: to_f64(self.learning_rate),
            input_limit: self.input_limit,
        };
        serde_json::to_writer(&mut f, &meta)?;
        f.write_all(b"\n")?;
        for line in self.canonical_lines() {
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, meta_line) = lines.next().ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            line: 1,
            message: "missing solver meta line".into(),
        })?;
        let meta: SolverMeta = serde_json::from_str(meta_line).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })?;
        if meta.format != SOLVER_FORMAT {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: 1,
                message: format!("unknown solver format {:?}", meta.format),
            });
        }
        let mut solver = TrigramSolver::new(sc(meta.alpha), sc(meta.learning_rate));
        solver.input_limit = meta.input_limit;
        for (lineno, line) in lines {
            let rec: CountLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if rec.weight < 0.0 {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("negative count weight {}", rec.weight),
                });
            }
            solver
                .counts
                .entry((rec.t1, rec.t2))
                .or_default()
                .insert(rec.t3, sc(rec.weight));
        }
        Ok(solver)
    }
}

const SOLVER_FORMAT: &str = "cdmem-trigram-v1";

#[derive(Debug, Serialize, Deserialize)]
struct SolverMeta {
    format: String,
    alpha: f64,
    learning_rate: f64,
    input_limit: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountLine {
    t1: u32,
    t2: u32,
    t3: u32,
    weight: f64,
}

impl<S: Scalar> SolverPolicy<S> for TrigramSolver<S> {
    fn score(&self, prefix: &[u32], target: &[u32], vocab_size: usize) -> Result<Vec<S>> {
        if target.is_empty() {
            return Err(Error::EmptyInput("score needs a non-empty target"));
        }
        let mut full = Vec::with_capacity(prefix.len() + target.len());
        full.extend_from_slice(prefix);
        full.extend_from_slice(target);
        let mut losses = Vec::with_capacity(target.len());
        for (i, &tok) in target.iter().enumerate() {
            let ctx = Self::context_at(&full, prefix.len() + i);
            losses.push(-self.prob(ctx, tok, vocab_size).ln());
        }
        Ok(losses)
    }

    fn generate(&self, prefix: &[u32], max_tokens: usize, stop_token: Option<u32>) -> Vec<u32> {
        let mut full = prefix.to_vec();
        let mut out = Vec::new();
        while out.len() < max_tokens {
            let ctx = Self::context_at(&full, full.len());
            let next = self.argmax(ctx);
            if Some(next) == stop_token {
                break;
            }
            full.push(next);
            out.push(next);
        }
        out
    }

    fn train_step(&mut self, prefix: &[u32], target: &[u32], weights: &[S]) -> Result<()> {
        if weights.len() != target.len() {
            return Err(Error::LengthMismatch {
                what: "per-token weights",
                got: weights.len(),
                expected: target.len(),
            });
        }
        let mut full = Vec::with_capacity(prefix.len() + target.len());
        full.extend_from_slice(prefix);
        full.extend_from_slice(target);
        for (i, &tok) in target.iter().enumerate() {
            let w = weights[i];
            if w == S::zero() {
                continue;
            }
            let ctx = Self::context_at(&full, prefix.len() + i);
            *self
                .counts
                .entry(ctx)
                .or_default()
                .entry(tok)
                .or_insert_with(S::zero) += self.learning_rate * w;
        }
        Ok(())
    }

    fn input_limit(&self) -> usize {
        self.input_limit
    }
}

/* ------------------------ selection-inference chain --------------------- */

/// One (retrieval, inference) step.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ChainStep {
    pub retrieval: RetrievalBundle,
    pub inference: TokenSequence,
}

/// Alternating retrievals and inferences with a designated prediction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SelectionInferenceChain {
    pub steps: Vec<ChainStep>,
    pub prediction_index: usize,
}

impl SelectionInferenceChain {
    pub fn length(&self) -> usize {
        self.steps.len()
    }

    pub fn prediction(&self) -> &TokenSequence {
        &self.steps[self.prediction_index].inference
    }

    /// Steps strictly before retrieval `i` (the prior rollout w.r.t. r_i).
    pub fn prior_split(&self, i: usize) -> &[ChainStep] {
        &self.steps[..i]
    }

    /// Steps from retrieval `i` onward (the posterior rollout w.r.t. r_i).
    pub fn posterior_split(&self, i: usize) -> &[ChainStep] {
        &self.steps[i..]
    }
}

/// Configuration for running a chain.
#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub retrieval: RetrievalConfig,
    pub mode: QueryMode,
    pub max_tokens: usize,
    pub stop_token: Option<u32>,
    /// Which inference is the prediction (j). Single-hop fixes this at 0.
    pub prediction_hop: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            retrieval: RetrievalConfig::default(),
            mode: QueryMode::Eval,
            max_tokens: 48,
            stop_token: None,
            prediction_hop: 0,
        }
    }
}

/// Execute the single-hop chain: one retrieval (when a store is given), one
/// greedy inference over the assembled prompt, prediction at hop 0.
pub fn selection_inference_chain<S: Scalar>(
    solver: &dyn SolverPolicy<S>,
    x: &TokenSequence,
    store: Option<&MemoryStore<S>>,
    embedder: &Embedder<S>,
    vocab: &Vocab,
    cfg: &ChainConfig,
) -> Result<SelectionInferenceChain> {
    let retrieval = match store {
        Some(store) if !store.is_empty() => {
            let qs = select_queries(x, embedder, cfg.mode, &cfg.retrieval)?;
            retrieve_and_assemble(store, &qs, x)
        }
        _ => RetrievalBundle::bare(x),
    };
    let generated = solver.generate(
        &retrieval.assembled_prefix.tokens,
        cfg.max_tokens,
        cfg.stop_token,
    );
    let inference = TokenSequence::from_tokens(generated, vocab)?;
    Ok(SelectionInferenceChain {
        steps: vec![ChainStep {
            retrieval,
            inference,
        }],
        prediction_index: cfg.prediction_hop.min(0),
    })
}

/* --------------------------- wire-backed solver ------------------------- */

/// Scoring extension request: prompt + target → per-token logprobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprobs: Vec<f64>,
}

/// Transport for an external solver: completion plus the scoring extension.
pub trait SolverTransport: Send + Sync {
    fn complete(&self, req: &WireRequest) -> Result<WireResponse>;
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse>;
}

/// HTTP solver transport posting to `<base>/complete` and `<base>/score`.
pub struct HttpSolverTransport {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpSolverTransport {
    pub fn new(base_url: &str) -> Self {
        HttpSolverTransport {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout(std::time::Duration::from_secs(120))
                .build(),
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        req: &Req,
    ) -> Result<Resp> {
        let url = format!("{}/{path}", self.base_url);
        let resp = self
            .agent
            .post(&url)
            .send_json(serde_json::to_value(req)?)
            .map_err(|e| Error::Protocol(format!("solver wire call failed: {e}")))?;
        resp.into_json()
            .map_err(|e| Error::Protocol(format!("malformed solver response: {e}")))
    }
}

impl SolverTransport for HttpSolverTransport {
    fn complete(&self, req: &WireRequest) -> Result<WireResponse> {
        self.post("complete", req)
    }

    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        self.post("score", req)
    }
}

/// External solver attached over the wire protocol. Training happens on the
/// remote side, so `train_step` is unsupported here.
pub struct WireSolver<T> {
    transport: T,
    vocab: Arc<Mutex<Vocab>>,
    input_limit: usize,
}

impl<T: SolverTransport> WireSolver<T> {
    pub fn new(transport: T, vocab: Arc<Mutex<Vocab>>, input_limit: usize) -> Self {
        WireSolver {
            transport,
            vocab,
            input_limit,
        }
    }
}

impl<S: Scalar, T: SolverTransport> SolverPolicy<S> for WireSolver<T> {
    fn score(&self, prefix: &[u32], target: &[u32], _vocab_size: usize) -> Result<Vec<S>> {
        let vocab = self.vocab.lock().unwrap();
        let req = ScoreRequest {
            prompt: vocab.decode(prefix)?,
            target: vocab.decode(target)?,
        };
        drop(vocab);
        let resp = self.transport.score(&req)?;
        if resp.logprobs.len() != target.len() {
            return Err(Error::Protocol(format!(
                "scorer returned {} logprobs for {} target tokens",
                resp.logprobs.len(),
                target.len()
            )));
        }
        Ok(resp.logprobs.iter().map(|lp| sc(-lp)).collect())
    }

    fn generate(&self, prefix: &[u32], max_tokens: usize, _stop_token: Option<u32>) -> Vec<u32> {
        let prompt = match self.vocab.lock().unwrap().decode(prefix) {
            Ok(p) => p,
            Err(_) => return Vec::new(),
        };
        let req = WireRequest {
            prompt,
            max_tokens,
            temperature: 0.0,
        };
        match self.transport.complete(&req) {
            Ok(resp) => {
                let mut vocab = self.vocab.lock().unwrap();
                let mut ids = vocab.encode(&resp.text);
                ids.truncate(max_tokens);
                ids
            }
            Err(e) => {
                log::warn!("wire solver generation failed: {e}");
                Vec::new()
            }
        }
    }

    fn train_step(&mut self, _prefix: &[u32], _target: &[u32], _weights: &[S]) -> Result<()> {
        Err(Error::Unsupported(
            "wire solvers train on the remote side; only score/generate are proxied",
        ))
    }

    fn input_limit(&self) -> usize {
        self.input_limit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(vocab: &mut Vocab, text: &str) -> Vec<u32> {
        vocab.encode(text)
    }

    #[test]
    fn untrained_losses_are_log_vocab_size() {
        let mut vocab = Vocab::new();
        let target = ids(&mut vocab, "a b c");
        let solver = TrigramSolver::<f64>::default();
        let v = 50usize;
        let losses = solver.score(&[], &target, v).unwrap();
        for l in losses {
            assert!((l - (v as f64).ln()).abs() < 1e-12);
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn training_strictly_reduces_target_losses() {
        let mut vocab = Vocab::new();
        let prefix = ids(&mut vocab, "the question is");
        let target = ids(&mut vocab, "it rains because clouds form");
        let mut solver = TrigramSolver::<f64>::default();
        let before = solver.score(&prefix, &target, vocab.len()).unwrap();
        let w = vec![1.0; target.len()];
        for _ in 0..100 {
            solver.train_step(&prefix, &target, &w).unwrap();
        }
        let after = solver.score(&prefix, &target, vocab.len()).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(a < b, "loss did not decrease: {a} vs {b}");
            assert!(*a >= 0.0);
        }
    }

    #[test]
    fn zero_weights_change_nothing() {
        let mut vocab = Vocab::new();
        let target = ids(&mut vocab, "x y z");
        let mut solver = TrigramSolver::<f64>::default();
        let digest = solver.state_digest();
        solver
            .train_step(&[], &target, &[0.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(solver.state_digest(), digest);
        let losses = solver.score(&[], &target, vocab.len()).unwrap();
        assert!((losses[0] - (vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn tail_weights_move_probabilities_more_than_head_weights() {
        let mut vocab = Vocab::new();
        // seven tokens: positions 0-1 head (w=0.1), 2-6 tail (w=0.9)
        let target = ids(&mut vocab, "h1 h2 t1 t2 t3 t4 t5");
        let weights: Vec<f64> = crate::distill::segment_weights(7, 5);
        let mut solver = TrigramSolver::<f64>::default();
        let v = vocab.len();
        let p_uniform = 1.0 / v as f64;
        solver.train_step(&[], &target, &weights).unwrap();
        // head position 1 and tail position 3 have symmetric contexts
        // (each the unique continuation of its bigram)
        let head_ctx = (BOS, target[0]);
        let tail_ctx = (target[1], target[2]);
        let d_head = solver.prob(head_ctx, target[1], v) - p_uniform;
        let d_tail = solver.prob(tail_ctx, target[3], v) - p_uniform;
        assert!(d_tail > d_head, "tail {d_tail} vs head {d_head}");
    }

    #[test]
    fn count_updates_are_additive_and_order_free() {
        let mut vocab = Vocab::new();
        let a = ids(&mut vocab, "p q r");
        let b = ids(&mut vocab, "r q p");
        let w = vec![1.0; 3];
        let w2 = vec![2.0; 3];

        let mut s1 = TrigramSolver::<f64>::default();
        s1.train_step(&[], &a, &w).unwrap();
        s1.train_step(&[], &a, &w).unwrap();
        let mut s2 = TrigramSolver::<f64>::default();
        s2.train_step(&[], &a, &w2).unwrap();
        assert_eq!(s1.state_digest(), s2.state_digest());

        let mut s3 = TrigramSolver::<f64>::default();
        s3.train_step(&[], &a, &w).unwrap();
        s3.train_step(&[], &b, &w).unwrap();
        let mut s4 = TrigramSolver::<f64>::default();
        s4.train_step(&[], &b, &w).unwrap();
        s4.train_step(&[], &a, &w).unwrap();
        assert_eq!(s3.state_digest(), s4.state_digest());
    }

    #[test]
    fn greedy_decoding_follows_trained_continuations() {
        let mut vocab = Vocab::new();
        let abc = ids(&mut vocab, "a b c");
        let mut solver = TrigramSolver::<f64>::default();
        solver.train_step(&[], &abc, &[1.0, 1.0, 1.0]).unwrap();
        let out = solver.generate(&abc[..2], 1, None);
        assert_eq!(out, vec![abc[2]]);
    }

    #[test]
    fn untrained_decoding_emits_the_lowest_id() {
        let mut vocab = Vocab::new();
        let _ = ids(&mut vocab, "w0 w1 w2");
        let solver = TrigramSolver::<f64>::default();
        let out = solver.generate(&[2], 5, None);
        assert_eq!(out, vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn generation_respects_cap_and_stop_token() {
        let mut vocab = Vocab::new();
        let seq = ids(&mut vocab, "a b </s>");
        let mut solver = TrigramSolver::<f64>::default();
        solver.train_step(&[], &seq, &[1.0, 1.0, 1.0]).unwrap();
        let stop = vocab.id("</s>").unwrap();
        // stops before emitting the stop token
        let out = solver.generate(&[], 10, Some(stop));
        assert_eq!(out, vec![seq[0], seq[1]]);
        // cap limits length
        let out = solver.generate(&[], 1, Some(stop));
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn weight_length_mismatch_is_rejected() {
        let mut vocab = Vocab::new();
        let t = ids(&mut vocab, "a b");
        let mut solver = TrigramSolver::<f64>::default();
        assert!(matches!(
            solver.train_step(&[], &t, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn solver_state_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("solver.jsonl");
        let mut vocab = Vocab::new();
        let t = ids(&mut vocab, "a b c d e f");
        let mut solver = TrigramSolver::<f64>::default();
        solver
            .train_step(&[], &t, &crate::distill::segment_weights(6, 5))
            .unwrap();
        solver.save(&path).unwrap();
        let loaded = TrigramSolver::<f64>::load(&path).unwrap();
        assert_eq!(loaded.state_digest(), solver.state_digest());
    }

    #[test]
    fn single_hop_chain_over_an_empty_store_uses_the_bare_task() {
        let mut vocab = Vocab::new();
        let x = TokenSequence::new("a b", &mut vocab);
        let abc = ids(&mut vocab, "a b c");
        let mut solver = TrigramSolver::<f64>::default();
        solver.train_step(&[], &abc, &[1.0, 1.0, 1.0]).unwrap();
        let emb = Embedder::<f64>::hash_only(8, 0, vocab.len());
        let store = MemoryStore::<f64>::new(8, 0);
        let cfg = ChainConfig {
            max_tokens: 1,
            ..ChainConfig::default()
        };
        let chain =
            selection_inference_chain(&solver, &x, Some(&store), &emb, &vocab, &cfg).unwrap();
        assert_eq!(chain.length(), 1);
        assert!(chain.steps[0].retrieval.retrieved.is_empty());
        assert_eq!(chain.steps[0].retrieval.assembled_prefix, x);
        assert_eq!(chain.prediction().tokens, vec![abc[2]]);
        // prior/posterior split at the first retrieval
        assert!(chain.prior_split(0).is_empty());
        assert_eq!(chain.posterior_split(0).len(), 1);
    }

    #[test]
    fn wire_solver_proxies_score_and_generate() {
        struct MockTransport;
        impl SolverTransport for MockTransport {
            fn complete(&self, req: &WireRequest) -> Result<WireResponse> {
                assert!(req.prompt.contains("question"));
                Ok(WireResponse {
                    text: "Answer: yes".into(),
                })
            }
            fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
                let n = crate::tokenizer::tokenize_str(&req.target).len();
                Ok(ScoreResponse {
                    logprobs: vec![-0.5; n],
                })
            }
        }
        let vocab = Arc::new(Mutex::new(Vocab::new()));
        let (prefix, target) = {
            let mut v = vocab.lock().unwrap();
            (v.encode("the question"), v.encode("yes it is"))
        };
        let mut solver = WireSolver::new(MockTransport, vocab.clone(), 512);
        let losses: Vec<f64> = solver.score(&prefix, &target, 0).unwrap();
        assert_eq!(losses, vec![0.5, 0.5, 0.5]);
        let gen = SolverPolicy::<f64>::generate(&solver, &prefix, 8, None);
        assert_eq!(vocab.lock().unwrap().decode(&gen).unwrap(), "answer: yes");
        assert!(matches!(
            SolverPolicy::<f64>::train_step(&mut solver, &prefix, &target, &[1.0, 1.0, 1.0]),
            Err(Error::Unsupported(_))
        ));
    }
}
