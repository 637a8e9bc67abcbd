//! Teacher-oracle access: a vendor-neutral completion wire client with
//! content-addressed caching, retries with exponential backoff, and bounded
//! in-flight concurrency, plus deterministic mocks for offline runs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::{detokenize_str, tokenize_str};

/// One completion request.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub oracle_id: String,
}

impl OracleRequest {
    /// Content address: digest of (prompt, max_tokens, temperature, oracle_id).
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.prompt.as_bytes());
        h.update([0u8]);
        h.update(self.max_tokens.to_le_bytes());
        h.update(self.temperature.to_le_bytes());
        h.update([0u8]);
        h.update(self.oracle_id.as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Anything that can complete a prompt.
pub trait TeacherOracle: Send + Sync {
    fn complete(&self, req: &OracleRequest) -> Result<String>;

    /// Identifier recorded in corpora.
    fn id(&self) -> &str {
        "oracle"
    }

    /// Number of completions served so far (mocks count too).
    fn calls(&self) -> usize {
        0
    }
}

/* ---------------------------- mock oracles ---------------------------- */

/// Returns its prompt verbatim. The workhorse of offline tests.
#[derive(Debug, Default)]
pub struct EchoOracle {
    calls: AtomicUsize,
}

impl EchoOracle {
    pub fn new() -> Self {
        Self::default()
    }
}

impl TeacherOracle for EchoOracle {
    fn complete(&self, req: &OracleRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(req.prompt.clone())
    }

    fn id(&self) -> &str {
        "mock:echo"
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Echoes the prompt truncated to a token budget.
#[derive(Debug)]
pub struct TruncatingEchoOracle {
    pub cap: usize,
    calls: AtomicUsize,
}

impl TruncatingEchoOracle {
    pub fn new(cap: usize) -> Self {
        TruncatingEchoOracle {
            cap,
            calls: AtomicUsize::new(0),
        }
    }
}

impl TeacherOracle for TruncatingEchoOracle {
    fn complete(&self, req: &OracleRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let toks = tokenize_str(&req.prompt);
        let cut = toks.len().min(self.cap);
        Ok(detokenize_str(&toks[..cut]))
    }

    fn id(&self) -> &str {
        "mock:truncating-echo"
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Rule-based mock built from a closure.
pub struct FnOracle<F> {
    f: F,
    id: String,
    calls: AtomicUsize,
}

impl<F: Fn(&str) -> String + Send + Sync> FnOracle<F> {
    pub fn new(id: &str, f: F) -> Self {
        FnOracle {
            f,
            id: id.to_string(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl<F: Fn(&str) -> String + Send + Sync> TeacherOracle for FnOracle<F> {
    fn complete(&self, req: &OracleRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok((self.f)(&req.prompt))
    }

    fn id(&self) -> &str {
        &self.id
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/* ----------------------------- wire client ---------------------------- */

/// Request body sent over the wire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
}

/// Response body expected back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    pub text: String,
}

/// Request/response transport. HTTP in production, closures in tests.
pub trait Transport: Send + Sync {
    fn send(&self, req: &WireRequest) -> Result<WireResponse>;
}

/// POSTs JSON to a completion endpoint. The bearer credential comes from the
/// environment only and is never logged or echoed into config files.
pub struct HttpTransport {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

/// Environment variable holding the oracle credential.
pub const TOKEN_ENV_VAR: &str = "CDMEM_ORACLE_TOKEN";

impl HttpTransport {
    pub fn new(url: &str) -> Self {
        HttpTransport {
            url: url.to_string(),
            token: std::env::var(TOKEN_ENV_VAR).ok(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &WireRequest) -> Result<WireResponse> {
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            call = call.set("Authorization", &format!("Bearer {token}"));
        }
        let resp = call
            .send_json(serde_json::to_value(req)?)
            .map_err(|e| Error::Protocol(format!("wire call failed: {e}")))?;
        resp.into_json::<WireResponse>()
            .map_err(|e| Error::Protocol(format!("malformed completion response: {e}")))
    }
}

impl<F: Fn(&WireRequest) -> Result<WireResponse> + Send + Sync> Transport for F {
    fn send(&self, req: &WireRequest) -> Result<WireResponse> {
        self(req)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheLine {
    hash: String,
    completion: String,
    timestamp: u64,
    oracle_id: String,
}

/// Line-delimited completion cache keyed by request digest.
#[derive(Debug, Default)]
pub struct OracleCache {
    entries: HashMap<String, String>,
    path: Option<PathBuf>,
}

impl OracleCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a persistent cache file.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (lineno, line) in fs::read_to_string(path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
                entries.insert(rec.hash, rec.completion);
            }
        }
        Ok(OracleCache {
            entries,
            path: Some(path.to_path_buf()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn get(&self, key: &str) -> Option<&String> {
        self.entries.get(key)
    }

    fn put(&mut self, key: String, completion: &str, oracle_id: &str) -> Result<()> {
        if let Some(path) = &self.path {
            let line = CacheLine {
                hash: key.clone(),
                completion: completion.to_string(),
                timestamp: unix_seconds(),
                oracle_id: oracle_id.to_string(),
            };
            let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n")?;
        }
        self.entries.insert(key, completion.to_string());
        Ok(())
    }
}

/// Admission gate bounding in-flight wire requests.
struct Gate {
    state: Mutex<usize>,
    cv: Condvar,
    limit: usize,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Gate {
            state: Mutex::new(0),
            cv: Condvar::new(),
            limit,
        }
    }

    fn acquire(&self) {
        let mut inflight = self.state.lock().unwrap();
        while *inflight >= self.limit {
            inflight = self.cv.wait(inflight).unwrap();
        }
        *inflight += 1;
    }

    fn release(&self) {
        let mut inflight = self.state.lock().unwrap();
        *inflight -= 1;
        self.cv.notify_one();
    }
}

/// Completion client with cache, retries and bounded concurrency.
pub struct WireOracle<T> {
    transport: T,
    cache: Mutex<OracleCache>,
    gate: Gate,
    oracle_id: String,
    max_retries: u32,
    backoff: Duration,
    wire_calls: AtomicUsize,
    served: AtomicUsize,
}

pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_CONCURRENCY: usize = 4;

impl<T: Transport> WireOracle<T> {
    pub fn new(transport: T, oracle_id: &str, cache: OracleCache) -> Self {
        WireOracle {
            transport,
            cache: Mutex::new(cache),
            gate: Gate::new(DEFAULT_CONCURRENCY),
            oracle_id: oracle_id.to_string(),
            max_retries: DEFAULT_RETRIES,
            backoff: Duration::from_millis(200),
            wire_calls: AtomicUsize::new(0),
            served: AtomicUsize::new(0),
        }
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        assert!(limit >= 1);
        self.gate = Gate::new(limit);
        self
    }

    /// Test hook: shrink the initial backoff delay.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn wire_calls(&self) -> usize {
        self.wire_calls.load(Ordering::SeqCst)
    }

    fn call_with_retries(&self, req: &OracleRequest) -> Result<String> {
        let wire = WireRequest {
            prompt: req.prompt.clone(),
            max_tokens: req.max_tokens,
            temperature: req.temperature,
        };
        let mut last_err = String::new();
        for attempt in 0..self.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            self.gate.acquire();
            self.wire_calls.fetch_add(1, Ordering::SeqCst);
            let result = self.transport.send(&wire);
            self.gate.release();
            match result {
                Ok(resp) => return Ok(resp.text),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Transport {
            attempts: self.max_retries,
            message: last_err,
            prompt: req.prompt.clone(),
        })
    }
}

impl<T: Transport> TeacherOracle for WireOracle<T> {
    fn complete(&self, req: &OracleRequest) -> Result<String> {
        let key = req.cache_key();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            self.served.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.clone());
        }
        let text = self.call_with_retries(req)?;
        self.cache
            .lock()
            .unwrap()
            .put(key, &text, &self.oracle_id)?;
        self.served.fetch_add(1, Ordering::SeqCst);
        Ok(text)
    }

    fn id(&self) -> &str {
        &self.oracle_id
    }

    fn calls(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }
}

/* ------------------------- batch update generation ---------------------- */

/// Options for corpus generation.
#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub params: crate::distill::TeacherParams,
    /// Also emit the recursive meta update per pair.
    pub emit_meta: bool,
    /// Stamp records with a fixed timestamp (deterministic corpora).
    pub fixed_timestamp: Option<u64>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            params: crate::distill::TeacherParams::default(),
            emit_meta: false,
            fixed_timestamp: None,
        }
    }
}

/// What a batch run produced: one prior and one posterior update per
/// datapoint (plus optional meta updates), the emitted pairs, and the count
/// of datapoints that failed and were skipped.
#[derive(Debug)]
pub struct BatchOutcome {
    pub updates: Vec<crate::distill::UpdateRecord>,
    pub pairs: Vec<crate::distill::UpdatePairRecord>,
    pub failures: usize,
}

/// Render the prior and posterior prompt for every datapoint and persist the
/// completions. Per-item oracle failures are logged and skipped; the caller
/// maps `failures > 0` onto a partial-failure exit status.
pub fn batch_generate_updates(
    dataset: &[crate::dataio::QADatapoint],
    oracle: &dyn TeacherOracle,
    opts: &BatchOptions,
    vocab: &mut crate::tokenizer::Vocab,
) -> BatchOutcome {
    use crate::distill::{
        bayesian_contrastive_distill, meta_distill, UpdateKind, UpdatePairRecord, UpdateRecord,
    };
    use crate::tokenizer::TokenSequence;

    let mut updates = Vec::with_capacity(dataset.len() * 2);
    let mut pairs = Vec::with_capacity(dataset.len());
    let mut failures = 0usize;
    let mut t = 0u64;
    for (i, item) in dataset.iter().enumerate() {
        let m = TokenSequence::new(&item.context, vocab);
        let q = TokenSequence::new(&item.question, vocab);
        let y = TokenSequence::new(&item.answer, vocab);
        let pair = match bayesian_contrastive_distill(
            oracle,
            &m,
            &q,
            &TokenSequence::empty(),
            &y,
            &opts.params,
            vocab,
        ) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("datapoint {i}: update generation failed, skipping: {e}");
                failures += 1;
                continue;
            }
        };
        let meta = if opts.emit_meta {
            match meta_distill(oracle, &pair, &opts.params, vocab) {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!("datapoint {i}: meta update failed, skipping meta: {e}");
                    None
                }
            }
        } else {
            None
        };
        let timestamp = opts.fixed_timestamp.unwrap_or_else(unix_seconds);
        let mut push = |kind: UpdateKind, text: &str, t: &mut u64| {
            updates.push(UpdateRecord {
                t: *t,
                datapoint: i,
                task_id: item.task_id.clone(),
                x: item.task_prompt(),
                y_hat: String::new(),
                y: item.answer.clone(),
                kind,
                update: text.to_string(),
                oracle_id: oracle.id().to_string(),
                timestamp,
            });
            *t += 1;
        };
        push(UpdateKind::Prior, &pair.prior.text, &mut t);
        push(UpdateKind::Posterior, &pair.posterior.text, &mut t);
        if let Some(meta) = &meta {
            push(UpdateKind::Meta, &meta.text, &mut t);
        }
        pairs.push(UpdatePairRecord {
            x: item.task_prompt(),
            y_hat: String::new(),
            y: item.answer.clone(),
            u_prior: pair.prior.text.clone(),
            u_posterior: pair.posterior.text.clone(),
            u_meta: meta.map(|m| m.text),
            oracle_id: oracle.id().to_string(),
            timestamp,
        });
    }
    BatchOutcome {
        updates,
        pairs,
        failures,
    }
}
