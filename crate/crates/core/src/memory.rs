//! Episodic store of (context, update) records with normalized-key indexing
//! and exact inner-product search.
//!
//! Keys are never persisted: the record file carries symbolic text only and
//! keys are recomputed against the active embedding table on load, which is
//! what makes per-epoch re-encoding an honest operation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::matrix::{dot, norm2, normalize};
use crate::scalar::{to_f64, Scalar};
use crate::tokenizer::{tokenize_str, TokenSequence, Vocab};

/// Hard cap on stored update length, ordinal prefix included.
pub const UPDATE_TOKEN_CAP: usize = 200;

/// One stored memory: symbolic (context, update, ordinal) plus the derived
/// unit key under the store's current embedding epoch.
#[derive(Debug, Clone)]
pub struct MemoryRecord<S> {
    pub ordinal: u64,
    pub context: TokenSequence,
    pub update: TokenSequence,
    pub key: Vec<S>,
}

/// Normalized sum of all token embeddings of `context ⊕ update`.
///
/// Errors if both sequences are empty or the sum has zero norm; callers that
/// must stay total use [`key_or_fallback`].
pub fn compute_key<S: Scalar>(
    context: &TokenSequence,
    update: &TokenSequence,
    embedder: &Embedder<S>,
) -> Result<Vec<S>> {
    if context.is_empty() && update.is_empty() {
        return Err(Error::EmptyInput(
            "compute_key needs a non-empty context or update",
        ));
    }
    let mut key = vec![S::zero(); embedder.dim()];
    for &id in context.tokens.iter().chain(update.tokens.iter()) {
        for (k, v) in key.iter_mut().zip(embedder.row(id)) {
            *k += v;
        }
    }
    if normalize(&mut key) {
        Ok(key)
    } else {
        Err(Error::DegenerateKey)
    }
}

/// Like [`compute_key`] but substitutes the basis vector e0 for degenerate
/// sums, logging a warning, so inserts stay total.
pub fn key_or_fallback<S: Scalar>(
    context: &TokenSequence,
    update: &TokenSequence,
    embedder: &Embedder<S>,
) -> Vec<S> {
    match compute_key(context, update, embedder) {
        Ok(k) => k,
        Err(_) => {
            log::warn!("degenerate memory key, substituting basis vector e0");
            let mut k = vec![S::zero(); embedder.dim()];
            k[0] = S::one();
            k
        }
    }
}

/// Serialized line format: symbolic fields only, keys derived on load.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    t: u64,
    context_text: String,
    update_text: String,
}

/// Statistics from a full-store consistency check.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub records: usize,
    pub dim: usize,
    pub embedding_epoch: u64,
    pub max_norm_error: f64,
    pub max_key_error: f64,
}

/// Ordered record list plus a contiguous key matrix for the scan hot path.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore<S> {
    records: Vec<MemoryRecord<S>>,
    key_matrix: Vec<S>,
    dim: usize,
    embedding_epoch: u64,
}

impl<S: Scalar> MemoryStore<S> {
    pub fn new(dim: usize, embedding_epoch: u64) -> Self {
        MemoryStore {
            records: Vec::new(),
            key_matrix: Vec::new(),
            dim,
            embedding_epoch,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding_epoch(&self) -> u64 {
        self.embedding_epoch
    }

    pub fn records(&self) -> &[MemoryRecord<S>] {
        &self.records
    }

    pub fn record(&self, id: usize) -> Option<&MemoryRecord<S>> {
        self.records.get(id)
    }

    pub fn contains_ordinal(&self, t: u64) -> bool {
        self.records.iter().any(|r| r.ordinal == t)
    }

    /// Insert an update under ordinal `t`.
    ///
    /// The update text is prefixed with `t=<t>. `, tokenized, and truncated
    /// to [`UPDATE_TOKEN_CAP`] tokens (prefix counted within the limit).
    pub fn insert(
        &mut self,
        t: u64,
        context: &TokenSequence,
        update_text: &str,
        embedder: &Embedder<S>,
        vocab: &mut Vocab,
    ) -> Result<usize> {
        if tokenize_str(update_text).is_empty() {
            return Err(Error::EmptyInput(
                "memory updates must contain at least one token",
            ));
        }
        if self.contains_ordinal(t) {
            return Err(Error::DuplicateOrdinal(t));
        }
        let prefixed = format!("t={t}. {update_text}");
        let update = TokenSequence::new(&prefixed, vocab).truncated(UPDATE_TOKEN_CAP, vocab)?;
        self.push_record(t, context.clone(), update, embedder);
        Ok(self.records.len() - 1)
    }

    fn push_record(
        &mut self,
        t: u64,
        context: TokenSequence,
        update: TokenSequence,
        embedder: &Embedder<S>,
    ) {
        debug_assert_eq!(embedder.dim(), self.dim);
        let key = key_or_fallback(&context, &update, embedder);
        self.key_matrix.extend_from_slice(&key);
        self.records.push(MemoryRecord {
            ordinal: t,
            context,
            update,
            key,
        });
    }

    /// Recompute every key under a refreshed table.
    ///
    /// No-op (with a warning) when the table epoch already matches. The new
    /// key matrix is built aside and swapped in whole, so concurrent readers
    /// of a clone never observe a partially re-encoded store.
    pub fn reencode(&mut self, embedder: &Embedder<S>) {
        if embedder.epoch() == self.embedding_epoch {
            log::warn!(
                "reencode: store already at embedding epoch {}, nothing to do",
                self.embedding_epoch
            );
            return;
        }
        let mut matrix = Vec::with_capacity(self.records.len() * self.dim);
        let mut keys = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let key = key_or_fallback(&rec.context, &rec.update, embedder);
            matrix.extend_from_slice(&key);
            keys.push(key);
        }
        for (rec, key) in self.records.iter_mut().zip(keys) {
            rec.key = key;
        }
        self.key_matrix = matrix;
        self.embedding_epoch = embedder.epoch();
    }

    /// Exact top-k by inner product, descending; ties broken by lower
    /// ordinal. Returns fewer than k results when the store is smaller.
    pub fn nearest(&self, query: &[S], k: usize) -> Vec<(usize, S)> {
        assert!(k >= 1, "nearest needs k >= 1");
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        let mut scored: Vec<(usize, S)> = (0..self.records.len())
            .map(|i| {
                let row = &self.key_matrix[i * self.dim..(i + 1) * self.dim];
                (i, dot(row, query))
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.records[a.0].ordinal.cmp(&self.records[b.0].ordinal))
        });
        scored.truncate(k);
        scored
    }

    /// Recompute every key and compare against both stored views.
    pub fn audit(&self, embedder: &Embedder<S>) -> Result<AuditReport> {
        let mut max_norm_error = 0.0f64;
        let mut max_key_error = 0.0f64;
        for (i, rec) in self.records.iter().enumerate() {
            let fresh = key_or_fallback(&rec.context, &rec.update, embedder);
            let norm_err = (to_f64(norm2(&fresh)) - 1.0).abs();
            max_norm_error = max_norm_error.max(norm_err);
            let row = &self.key_matrix[i * self.dim..(i + 1) * self.dim];
            for j in 0..self.dim {
                let e1 = (to_f64(fresh[j]) - to_f64(rec.key[j])).abs();
                let e2 = (to_f64(fresh[j]) - to_f64(row[j])).abs();
                max_key_error = max_key_error.max(e1).max(e2);
            }
        }
        let report = AuditReport {
            records: self.records.len(),
            dim: self.dim,
            embedding_epoch: self.embedding_epoch,
            max_norm_error,
            max_key_error,
        };
        if max_key_error > 1e-12 {
            return Err(Error::Protocol(format!(
                "memory audit failed: stored keys deviate from recomputation by {max_key_error:e}"
            )));
        }
        if max_norm_error > 1e-9 {
            return Err(Error::Protocol(format!(
                "memory audit failed: key norms off unit by {max_norm_error:e}"
            )));
        }
        Ok(report)
    }

    /// Persist as line-delimited records `{t, context_text, update_text}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for rec in &self.records {
            let line = RecordLine {
                t: rec.ordinal,
                context_text: rec.context.text.clone(),
                update_text: rec.update.text.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load records, recomputing keys against the current table (keys are
    /// derived, never stale).
    pub fn load(path: &Path, embedder: &Embedder<S>, vocab: &mut Vocab) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut store = MemoryStore::new(embedder.dim(), embedder.epoch());
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                message,
            };
            let rec: RecordLine =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let prefix = format!("t={}. ", rec.t);
            if !rec.update_text.starts_with(&prefix) {
                return Err(parse_err(format!(
                    "update text must start with ordinal prefix {prefix:?}"
                )));
            }
            if store.contains_ordinal(rec.t) {
                return Err(parse_err(format!("duplicate ordinal t={}", rec.t)));
            }
            let context = TokenSequence::new(&rec.context_text, vocab);
            let update = TokenSequence::new(&rec.update_text, vocab);
            if update.len() > UPDATE_TOKEN_CAP {
                return Err(parse_err(format!(
                    "update has {} tokens, cap is {UPDATE_TOKEN_CAP}",
                    update.len()
                )));
            }
            store.push_record(rec.t, context, update, embedder);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingTable, HashEmbedder};

    fn basis_embedder(dim: usize, vocab_size: usize) -> Embedder<f64> {
        // identity rows: token i -> e_i (requires vocab_size <= dim)
        let mut rows = vec![0.0; vocab_size * dim];
        for i in 0..vocab_size {
            rows[i * dim + i] = 1.0;
        }
        Embedder::new(
            EmbeddingTable::from_flat(dim, 0, rows),
            HashEmbedder::new(dim, 0),
        )
    }

    fn seq(text: &str, vocab: &mut Vocab) -> TokenSequence {
        TokenSequence::new(text, vocab)
    }

    #[test]
    fn key_of_single_unit_row_is_that_row() {
        let mut vocab = Vocab::new();
        let c = seq("a", &mut vocab);
        let emb = basis_embedder(4, vocab.len());
        let key = compute_key(&c, &TokenSequence::empty(), &emb).unwrap();
        assert_eq!(key, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn key_normalizes_two_orthogonal_rows() {
        let mut vocab = Vocab::new();
        let c = seq("a b", &mut vocab);
        let emb = basis_embedder(4, vocab.len());
        let key = compute_key(&c, &TokenSequence::empty(), &emb).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((key[0] - r).abs() < 1e-12);
        assert!((key[1] - r).abs() < 1e-12);
    }

    #[test]
    fn key_is_symmetric_in_context_and_update() {
        let mut vocab = Vocab::new();
        let c = seq("a b c", &mut vocab);
        let u = seq("d e", &mut vocab);
        let emb = Embedder::<f64>::hash_only(16, 11, vocab.len());
        let k1 = compute_key(&c, &u, &emb).unwrap();
        let k2 = compute_key(&u, &c, &emb).unwrap();
        // permutation-invariant up to float summation order
        for (a, b) in k1.iter().zip(&k2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn key_errors_when_both_sides_empty() {
        let emb = Embedder::<f64>::hash_only(8, 0, 0);
        let err = compute_key(&TokenSequence::empty(), &TokenSequence::empty(), &emb);
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }

    #[test]
    fn insert_prefixes_truncates_and_appends() {
        let mut vocab = Vocab::new();
        let ctx = seq("some context", &mut vocab);
        let emb = Embedder::<f64>::hash_only(16, 1, vocab.len());
        let mut store = MemoryStore::new(16, 0);

        let long_update = vec!["tok"; 250].join(" ");
        let id = store
            .insert(2997, &ctx, &long_update, &emb, &mut vocab)
            .unwrap();
        assert_eq!(id, 0);
        let rec = store.record(0).unwrap();
        assert!(rec.update.text.starts_with("t=2997. "));
        assert_eq!(rec.update.len(), UPDATE_TOKEN_CAP);

        let id2 = store.insert(1, &ctx, "short", &emb, &mut vocab).unwrap();
        assert_eq!(id2, 1);
        assert_eq!(store.len(), 2);
        assert_eq!(store.key_matrix.len(), 2 * 16);
    }

    #[test]
    fn insert_rejects_duplicates_and_empty_updates() {
        let mut vocab = Vocab::new();
        let ctx = seq("c", &mut vocab);
        let emb = Embedder::<f64>::hash_only(8, 1, vocab.len());
        let mut store = MemoryStore::new(8, 0);
        store.insert(5, &ctx, "u", &emb, &mut vocab).unwrap();
        assert!(matches!(
            store.insert(5, &ctx, "v", &emb, &mut vocab),
            Err(Error::DuplicateOrdinal(5))
        ));
        assert!(matches!(
            store.insert(6, &ctx, "   ", &emb, &mut vocab),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn nearest_ranks_by_inner_product_with_ordinal_ties() {
        let mut vocab = Vocab::new();
        let a = seq("a", &mut vocab);
        let b = seq("b", &mut vocab);
        let c = seq("c", &mut vocab);
        let emb = basis_embedder(4, vocab.len());
        let mut store = MemoryStore::new(4, 0);
        for (t, ctx) in [(0u64, &a), (1, &b), (2, &c)] {
            let key = key_or_fallback(ctx, &TokenSequence::empty(), &emb);
            store.key_matrix.extend_from_slice(&key);
            store.records.push(MemoryRecord {
                ordinal: t,
                context: (*ctx).clone(),
                update: TokenSequence::empty(),
                key,
            });
        }
        let hits = store.nearest(&[0.0, 1.0, 0.0, 0.0], 1);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 1);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);

        // k larger than the store yields exactly N results
        assert_eq!(store.nearest(&[1.0, 0.0, 0.0, 0.0], 10).len(), 3);

        // exact ties resolve to the lower ordinal
        let q = [0.5, 0.5, 0.0, 0.0];
        let hits = store.nearest(&q, 2);
        assert_eq!(hits[0].0, 0);
        assert_eq!(hits[1].0, 1);

        // empty store -> empty result
        let empty = MemoryStore::<f64>::new(4, 0);
        assert!(empty.nearest(&q, 3).is_empty());
    }

    #[test]
    fn reencode_updates_keys_and_epoch() {
        let mut vocab = Vocab::new();
        let ctx = seq("alpha beta", &mut vocab);
        let mut emb = Embedder::<f64>::hash_only(8, 2, vocab.len());
        let mut store = MemoryStore::new(8, 0);
        store
            .insert(0, &ctx, "gamma delta", &emb, &mut vocab)
            .unwrap();
        store.insert(1, &ctx, "epsilon", &emb, &mut vocab).unwrap();
        let before: Vec<Vec<f64>> = store.records().iter().map(|r| r.key.clone()).collect();

        // same epoch: warn + no-op
        store.reencode(&emb);
        assert_eq!(store.embedding_epoch(), 0);

        let refreshed = crate::embedding::cooccurrence_refresh(
            &[seq("alpha beta gamma delta epsilon t=0 t=1", &mut vocab)],
            emb.table(),
            2,
            emb.fallback(),
        );
        emb.set_table(refreshed);
        store.reencode(&emb);
        assert_eq!(store.embedding_epoch(), 1);
        assert_eq!(store.len(), 2);
        assert_eq!(store.records()[0].ordinal, 0);
        assert_eq!(store.records()[1].ordinal, 1);
        let after: Vec<Vec<f64>> = store.records().iter().map(|r| r.key.clone()).collect();
        assert_ne!(before, after);
        // independently recomputed keys agree elementwise
        for rec in store.records() {
            let fresh = compute_key(&rec.context, &rec.update, &emb).unwrap();
            for (a, b) in fresh.iter().zip(&rec.key) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        store.audit(&emb).unwrap();
    }

    #[test]
    fn store_round_trips_with_derived_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        let mut vocab = Vocab::new();
        let ctx = seq("the kitchen is south", &mut vocab);
        let emb = Embedder::<f64>::hash_only(16, 7, vocab.len());
        let mut store = MemoryStore::new(16, 0);
        store
            .insert(3, &ctx, "The kitchen is south of the bathroom.", &emb, &mut vocab)
            .unwrap();
        store
            .insert(9, &ctx, "another update", &emb, &mut vocab)
            .unwrap();
        store.save(&path).unwrap();

        let mut vocab2 = vocab.clone();
        let loaded = MemoryStore::load(&path, &emb, &mut vocab2).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.records()[0].ordinal, 3);
        assert_eq!(loaded.records()[0].key, store.records()[0].key);
        loaded.audit(&emb).unwrap();
    }

    #[test]
    fn load_rejects_missing_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        std::fs::write(
            &path,
            "{\"t\":4,\"context_text\":\"c\",\"update_text\":\"no prefix here\"}\n",
        )
        .unwrap();
        let emb = Embedder::<f64>::hash_only(8, 0, 0);
        let mut vocab = Vocab::new();
        match MemoryStore::load(&path, &emb, &mut vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
