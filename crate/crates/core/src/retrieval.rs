//! PCA memory sampling and FiD-style prompt assembly.
//!
//! Queries for a task context are drawn from a candidate set of one key
//! embedding plus the top principal components of the token embedding
//! matrix. Eval mode takes the key and the leading components
//! deterministically; train mode samples candidates at random, which is the
//! retrieval randomization that helped source-task performance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::matrix::{dot, normalize, Mat};
use crate::memory::MemoryStore;
use crate::scalar::{sc, to_f64, Scalar};
use crate::tokenizer::{concat_all, TokenSequence};

// Close eigenvalue pairs converge slowly; the generous iteration cap is the
// safety valve, the residual is the real stop.
const POWER_ITERATIONS: usize = 10_000;
const RESIDUAL_TOL: f64 = 1e-12;
const RANK_TOL: f64 = 1e-12;

/// Query-selection mode of Algorithm "PCA memory sampling".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Train,
    Eval,
}

/// Where a query vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryProvenance {
    Key,
    Pca(usize),
}

/// Retrieval configuration; defaults match the experiment constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k_q: usize,
    pub k_pca: usize,
    pub rng_seed: u64,
    /// Train-mode sampling with replacement (off by default; duplicates
    /// waste lookups).
    pub with_replacement: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k_q: 4,
            k_pca: 6,
            rng_seed: 0,
            with_replacement: false,
        }
    }
}

/// A batch of unit-norm query vectors with provenance tags.
#[derive(Debug, Clone)]
pub struct QuerySet<S> {
    pub queries: Vec<Vec<S>>,
    pub mode: QueryMode,
    pub provenance: Vec<QueryProvenance>,
}

/// Top principal components of the row-centered embedding matrix.
///
/// Components are unit-norm, mutually orthogonal, ordered by descending
/// explained variance, and sign-fixed so the largest-magnitude coordinate is
/// positive. When the matrix has rank below `k_pca`, the remaining slots are
/// filled with deterministic perturbations of the key vector
/// re-orthogonalized against the components found so far, so callers always
/// get a full candidate set.
pub fn pca_components<S: Scalar>(x_embedded: &Mat<S>, k_pca: usize) -> Result<Mat<S>> {
    if x_embedded.rows() == 0 {
        return Err(Error::EmptyInput("pca needs at least one embedded token"));
    }
    let d = x_embedded.cols();
    if k_pca > d {
        return Err(Error::Config(format!(
            "k_pca ({k_pca}) cannot exceed the embedding dimension ({d})"
        )));
    }

    // Key direction used by the rank-deficiency fill.
    let mut key = vec![S::zero(); d];
    for i in 0..x_embedded.rows() {
        for (k, v) in key.iter_mut().zip(x_embedded.row(i)) {
            *k += *v;
        }
    }
    if !normalize(&mut key) {
        key = vec![S::zero(); d];
        key[0] = S::one();
    }

    let centered = x_embedded.center(&x_embedded.mean_row());
    let mut cov = centered.gram();

    let mut comps: Vec<Vec<S>> = Vec::with_capacity(k_pca);
    let mut first_eig: Option<f64> = None;
    while comps.len() < k_pca {
        match dominant_eigenvector(&cov, &comps) {
            Some((mut v, eig)) => {
                let cutoff = RANK_TOL * first_eig.unwrap_or(1.0).max(1.0);
                if to_f64(eig) <= cutoff {
                    break;
                }
                first_eig.get_or_insert(to_f64(eig));
                fix_sign(&mut v);
                cov.deflate(&v, eig);
                comps.push(v);
            }
            None => break,
        }
    }
    while comps.len() < k_pca {
        let idx = comps.len();
        let fill = fill_component(&key, &comps, idx, d);
        comps.push(fill);
    }
    Ok(Mat::from_rows(&comps))
}

/// Power iteration for the dominant eigenvector of `cov`, kept orthogonal to
/// previously extracted components.
fn dominant_eigenvector<S: Scalar>(cov: &Mat<S>, prior: &[Vec<S>]) -> Option<(Vec<S>, S)> {
    let d = cov.cols();
    // Harmonic start: deterministic, no special alignment with data axes.
    let mut v: Vec<S> = (0..d).map(|i| sc::<S>(1.0 / (i + 1) as f64)).collect();
    orthogonalize(&mut v, prior);
    if !normalize(&mut v) {
        return None;
    }
    for _ in 0..POWER_ITERATIONS {
        let mut w = cov.mul_vec(&v);
        orthogonalize(&mut w, prior);
        let eig = dot(&v, &w);
        // residual ||Cv - λv|| relative to the eigenvalue scale
        let mut res = S::zero();
        for (wi, vi) in w.iter().zip(&v) {
            let r = *wi - eig * *vi;
            res += r * r;
        }
        if !normalize(&mut w) {
            return Some((v, S::zero()));
        }
        v = w;
        if to_f64(res.sqrt()) <= RESIDUAL_TOL * to_f64(eig.abs()).max(1.0) {
            break;
        }
    }
    let w = cov.mul_vec(&v);
    let eig = dot(&v, &w);
    Some((v, eig))
}

fn orthogonalize<S: Scalar>(v: &mut [S], basis: &[Vec<S>]) {
    for b in basis {
        let proj = dot(v, b);
        for (vi, bi) in v.iter_mut().zip(b) {
            *vi -= proj * *bi;
        }
    }
}

/// Flip so the largest-magnitude coordinate is positive (first index wins
/// ties), making component signs deterministic.
fn fix_sign<S: Scalar>(v: &mut [S]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < S::zero() {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Deterministic perturbation of the key, orthogonal to everything found so
/// far. Tries successive basis axes until one survives orthogonalization.
fn fill_component<S: Scalar>(key: &[S], prior: &[Vec<S>], idx: usize, d: usize) -> Vec<S> {
    for m in 0..d {
        let axis = (idx + m) % d;
        let mut v = key.to_vec();
        v[axis] += sc::<S>(0.5);
        orthogonalize(&mut v, prior);
        // second pass tightens orthogonality
        orthogonalize(&mut v, prior);
        if normalize(&mut v) {
            let ok = prior
                .iter()
                .all(|b| to_f64(dot(&v, b)).abs() < 1e-8);
            if ok {
                fix_sign(&mut v);
                return v;
            }
        }
    }
    // d tries cannot all fail while prior.len() < d; keep total regardless.
    let mut v = vec![S::zero(); d];
    v[idx % d] = S::one();
    orthogonalize(&mut v, prior);
    normalize(&mut v);
    v
}

/// Candidate queries for one task context: its key plus PCA components.
#[derive(Debug, Clone)]
pub struct QueryCandidates<S> {
    pub key: Vec<S>,
    pub pca: Mat<S>,
}

impl<S: Scalar> QueryCandidates<S> {
    pub fn for_sequence(
        x: &TokenSequence,
        embedder: &Embedder<S>,
        k_pca: usize,
    ) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::EmptyInput("cannot form queries for an empty task"));
        }
        let embedded = embedder.embed(x);
        let pca = pca_components(&embedded, k_pca)?;
        let key = crate::memory::compute_key(x, &TokenSequence::empty(), embedder)
            .unwrap_or_else(|_| {
                let mut k = vec![S::zero(); embedder.dim()];
                k[0] = S::one();
                k
            });
        Ok(QueryCandidates { key, pca })
    }

    fn candidate(&self, i: usize) -> (Vec<S>, QueryProvenance) {
        if i == 0 {
            (self.key.clone(), QueryProvenance::Key)
        } else {
            (self.pca.row(i - 1).to_vec(), QueryProvenance::Pca(i - 1))
        }
    }

    /// Pick `k_q` queries.
    ///
    /// Eval: the key followed by components `0..k_q-1` in variance order.
    /// Train: uniform sample over all `k_pca + 1` candidates, seeded.
    pub fn select(
        &self,
        mode: QueryMode,
        k_q: usize,
        rng_seed: u64,
        with_replacement: bool,
    ) -> Result<QuerySet<S>> {
        let n_candidates = self.pca.rows() + 1;
        if k_q == 0 {
            return Err(Error::Config("k_q must be at least 1".into()));
        }
        if k_q > n_candidates {
            return Err(Error::Config(format!(
                "k_q ({k_q}) cannot exceed k_pca + 1 ({n_candidates})"
            )));
        }
        let picked: Vec<usize> = match mode {
            QueryMode::Eval => (0..k_q).collect(),
            QueryMode::Train => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                if with_replacement {
                    (0..k_q).map(|_| rng.gen_range(0..n_candidates)).collect()
                } else {
                    // partial Fisher-Yates
                    let mut idx: Vec<usize> = (0..n_candidates).collect();
                    for i in 0..k_q {
                        let j = rng.gen_range(i..n_candidates);
                        idx.swap(i, j);
                    }
                    idx.truncate(k_q);
                    idx
                }
            }
        };
        let mut queries = Vec::with_capacity(k_q);
        let mut provenance = Vec::with_capacity(k_q);
        for i in picked {
            let (q, p) = self.candidate(i);
            queries.push(q);
            provenance.push(p);
        }
        Ok(QuerySet {
            queries,
            mode,
            provenance,
        })
    }
}

/// One call covering candidate construction and selection.
pub fn select_queries<S: Scalar>(
    x: &TokenSequence,
    embedder: &Embedder<S>,
    mode: QueryMode,
    cfg: &RetrievalConfig,
) -> Result<QuerySet<S>> {
    QueryCandidates::for_sequence(x, embedder, cfg.k_pca)?.select(
        mode,
        cfg.k_q,
        cfg.rng_seed,
        cfg.with_replacement,
    )
}

/// Per-query retrieval trace entry, mirroring the analysis dump layout.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalTraceEntry {
    pub text: String,
    pub score: f64,
    pub order: usize,
}

/// Deduplicated retrieved updates plus the assembled solver prompt.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RetrievalBundle {
    pub retrieved: Vec<TokenSequence>,
    pub assembled_prefix: TokenSequence,
    /// Pre-dedup per-query hits in query order.
    pub trace: Vec<RetrievalTraceEntry>,
}

impl RetrievalBundle {
    /// Bundle for a task with no retrieval at all.
    pub fn bare(x: &TokenSequence) -> Self {
        RetrievalBundle {
            retrieved: Vec::new(),
            assembled_prefix: x.clone(),
            trace: Vec::new(),
        }
    }
}

/// Retrieve a single nearest update per query, de-duplicate by exact update
/// text keeping first occurrence, and assemble `r_0 ⊕ … ⊕ r_{m-1} ⊕ x`.
pub fn retrieve_and_assemble<S: Scalar>(
    store: &MemoryStore<S>,
    qs: &QuerySet<S>,
    x: &TokenSequence,
) -> RetrievalBundle {
    let mut retrieved: Vec<TokenSequence> = Vec::new();
    let mut trace = Vec::new();
    for (order, q) in qs.queries.iter().enumerate() {
        if let Some(&(id, score)) = store.nearest(q, 1).first() {
            let update = &store.records()[id].update;
            trace.push(RetrievalTraceEntry {
                text: update.text.clone(),
                score: to_f64(score),
                order,
            });
            if !retrieved.iter().any(|r| r.text == update.text) {
                retrieved.push(update.clone());
            }
        }
    }
    let mut parts: Vec<&TokenSequence> = retrieved.iter().collect();
    parts.push(x);
    RetrievalBundle {
        assembled_prefix: concat_all(&parts),
        retrieved,
        trace,
    }
}
