//! Token embedding tables with an epoch-refresh path.
//!
//! Two providers exist: a deterministic hash embedder (pseudorandom
//! unit-norm rows, reproducible across processes) and a co-occurrence
//! refresh that re-derives rows from a corpus, bumping the epoch stamp so
//! memory re-encoding has something real to chase.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hash::mix64;
use crate::matrix::{normalize, Mat};
use crate::scalar::{sc, to_f64, Scalar};
use crate::tokenizer::TokenSequence;

const TABLE_MAGIC: &[u8; 4] = b"CDEM";
const TABLE_VERSION: u32 = 1;

/// Immutable V×d embedding table stamped with the epoch it was derived in.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    dim: usize,
    epoch: u64,
    rows: Vec<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn from_flat(dim: usize, epoch: u64, rows: Vec<S>) -> Self {
        assert!(dim > 0, "dimension must be positive");
        assert_eq!(rows.len() % dim, 0, "flat buffer must be a whole number of rows");
        debug_assert!(rows.iter().all(|v| v.is_finite()), "table rows must be finite");
        EmbeddingTable { dim, epoch, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn row(&self, id: u32) -> Option<&[S]> {
        let i = id as usize;
        if i < self.vocab_size() {
            Some(&self.rows[i * self.dim..(i + 1) * self.dim])
        } else {
            None
        }
    }

    /// Binary layout: magic, u32 version, u32 V, u32 d, u64 epoch, then
    /// V·d little-endian f64 values, row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(TABLE_MAGIC)?;
        f.write_all(&TABLE_VERSION.to_le_bytes())?;
        f.write_all(&(self.vocab_size() as u32).to_le_bytes())?;
        f.write_all(&(self.dim as u32).to_le_bytes())?;
        f.write_all(&self.epoch.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.rows.len() * 8);
        for v in &self.rows {
            buf.extend_from_slice(&to_f64(*v).to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut header = [0u8; 4 + 4 + 4 + 4 + 8];
        f.read_exact(&mut header)
            .map_err(|_| Error::Protocol(format!("{}: truncated table header", path.display())))?;
        if &header[0..4] != TABLE_MAGIC {
            return Err(Error::Protocol(format!(
                "{}: bad magic, expected CDEM",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != TABLE_VERSION {
            return Err(Error::Protocol(format!(
                "{}: unsupported table version {version}",
                path.display()
            )));
        }
        let v = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let epoch = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let mut buf = vec![0u8; v * d * 8];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Protocol(format!("{}: truncated table body", path.display())))?;
        let mut rows = Vec::with_capacity(v * d);
        for chunk in buf.chunks_exact(8) {
            let x = f64::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Protocol(format!(
                    "{}: non-finite value in table",
                    path.display()
                )));
            }
            rows.push(sc::<S>(x));
        }
        Ok(EmbeddingTable { dim: d, epoch, rows })
    }
}

/// Look up every token of `seq`, producing a len×d matrix.
///
/// Errors with the offending id and position if the table does not cover a
/// token; callers who want the grow-on-the-fly behaviour go through
/// [`Embedder::embed`].
pub fn embed_sequence<S: Scalar>(
    seq: &TokenSequence,
    table: &EmbeddingTable<S>,
) -> Result<Mat<S>> {
    let d = table.dim();
    let mut data = Vec::with_capacity(seq.len() * d);
    for (position, &id) in seq.tokens.iter().enumerate() {
        let row = table.row(id).ok_or(Error::OutOfVocabulary {
            id,
            position,
            vocab_size: table.vocab_size(),
        })?;
        data.extend_from_slice(row);
    }
    Ok(Mat::from_flat(seq.len(), d, data))
}

/// Deterministic pseudorandom unit-norm row provider.
///
/// The row for token id `t` depends only on `(t, seed, d)`, so tables can be
/// regenerated or extended identically in any process.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2, "hash embedder needs d >= 2");
        HashEmbedder { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Unit-norm pseudorandom row for a token id.
    pub fn row<S: Scalar>(&self, id: u32) -> Vec<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed) ^ mix64(id as u64));
        loop {
            let mut row: Vec<f64> = Vec::with_capacity(self.dim);
            while row.len() < self.dim {
                // Box-Muller: two uniforms -> two standard normals.
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * u2;
                row.push(r * theta.cos());
                if row.len() < self.dim {
                    row.push(r * theta.sin());
                }
            }
            if normalize(&mut row) {
                return row.into_iter().map(sc).collect();
            }
        }
    }

    /// Materialize a table covering ids `0..vocab_size`.
    pub fn table<S: Scalar>(&self, vocab_size: usize, epoch: u64) -> EmbeddingTable<S> {
        let mut rows = Vec::with_capacity(vocab_size * self.dim);
        for id in 0..vocab_size as u32 {
            rows.extend(self.row::<S>(id));
        }
        EmbeddingTable::from_flat(self.dim, epoch, rows)
    }
}

/// An embedding table paired with the hash fallback for unseen token ids.
///
/// This is the total view the rest of the engine uses: fresh vocabulary at
/// eval time gets a deterministic hash row instead of an error.
#[derive(Debug, Clone)]
pub struct Embedder<S> {
    table: EmbeddingTable<S>,
    fallback: HashEmbedder,
}

impl<S: Scalar> Embedder<S> {
    pub fn new(table: EmbeddingTable<S>, fallback: HashEmbedder) -> Self {
        assert_eq!(table.dim(), fallback.dim(), "table and fallback dims differ");
        Embedder { table, fallback }
    }

    /// Hash-only embedder covering `vocab_size` ids at epoch 0.
    pub fn hash_only(dim: usize, seed: u64, vocab_size: usize) -> Self {
        let fallback = HashEmbedder::new(dim, seed);
        Embedder {
            table: fallback.table(vocab_size, 0),
            fallback,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.dim()
    }

    pub fn epoch(&self) -> u64 {
        self.table.epoch()
    }

    pub fn table(&self) -> &EmbeddingTable<S> {
        &self.table
    }

    pub fn fallback(&self) -> &HashEmbedder {
        &self.fallback
    }

    /// Swap in a refreshed table (exclusive-write responsibility of the caller).
    pub fn set_table(&mut self, table: EmbeddingTable<S>) {
        assert_eq!(table.dim(), self.fallback.dim());
        self.table = table;
    }

    /// Row for any token id: table row when covered, hash row otherwise.
    pub fn row(&self, id: u32) -> Vec<S> {
        match self.table.row(id) {
            Some(r) => r.to_vec(),
            None => self.fallback.row(id),
        }
    }

    /// Total version of [`embed_sequence`].
    pub fn embed(&self, seq: &TokenSequence) -> Mat<S> {
        let d = self.dim();
        let mut data = Vec::with_capacity(seq.len() * d);
        for &id in &seq.tokens {
            match self.table.row(id) {
                Some(r) => data.extend_from_slice(r),
                None => data.extend(self.fallback.row::<S>(id)),
            }
        }
        Mat::from_flat(seq.len(), d, data)
    }
}

/// Re-derive rows from corpus co-occurrence counts against a fixed hashed
/// feature basis of size d. Rows for tokens absent from the corpus are
/// copied from the old table; the epoch stamp always increments by one.
pub fn cooccurrence_refresh<S: Scalar>(
    corpus: &[TokenSequence],
    table: &EmbeddingTable<S>,
    window: usize,
    fallback: &HashEmbedder,
) -> EmbeddingTable<S> {
    assert!(window >= 1, "window must be >= 1");
    let d = table.dim();
    let epoch = table.epoch() + 1;

    if corpus.iter().all(|s| s.is_empty()) {
        log::warn!("cooccurrence_refresh: empty corpus, keeping old rows (epoch -> {epoch})");
        return EmbeddingTable::from_flat(d, epoch, table.rows.clone());
    }

    let max_id = corpus
        .iter()
        .flat_map(|s| s.tokens.iter().copied())
        .max()
        .unwrap_or(0) as usize;
    let vocab_size = table.vocab_size().max(max_id + 1);

    // feature(u) is a fixed hash of the token id, stable across epochs.
    let feature = |id: u32| (mix64(id as u64) % d as u64) as usize;

    let mut counts: Vec<f64> = vec![0.0; vocab_size * d];
    let mut seen = vec![false; vocab_size];
    for seq in corpus {
        let toks = &seq.tokens;
        for (i, &t) in toks.iter().enumerate() {
            seen[t as usize] = true;
            let lo = i.saturating_sub(window);
            let hi = (i + window).min(toks.len().saturating_sub(1));
            for j in lo..=hi {
                if j != i {
                    counts[t as usize * d + feature(toks[j])] += 1.0;
                }
            }
        }
    }

    let mut rows: Vec<S> = Vec::with_capacity(vocab_size * d);
    for id in 0..vocab_size {
        let slice = &mut counts[id * d..(id + 1) * d];
        if seen[id] && normalize(slice) {
            rows.extend(slice.iter().map(|&v| sc::<S>(v)));
        } else if let Some(old) = table.row(id as u32) {
            rows.extend_from_slice(old);
        } else {
            rows.extend(fallback.row::<S>(id as u32));
        }
    }
    EmbeddingTable::from_flat(d, epoch, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{dot, norm2};
    use crate::tokenizer::Vocab;

    fn seq(text: &str, vocab: &mut Vocab) -> TokenSequence {
        TokenSequence::new(text, vocab)
    }

    #[test]
    fn embed_sequence_is_row_lookup() {
        let mut vocab = Vocab::new();
        let s = seq("a b a", &mut vocab);
        let emb = Embedder::<f64>::hash_only(8, 1, vocab.len());
        let m = embed_sequence(&s, emb.table()).unwrap();
        assert_eq!(m.rows(), 3);
        assert_eq!(m.cols(), 8);
        assert_eq!(m.row(0), emb.table().row(s.tokens[0]).unwrap());
        assert_eq!(m.row(1), emb.table().row(s.tokens[1]).unwrap());
        // repeated token repeats the row
        assert_eq!(m.row(0), m.row(2));
    }

    #[test]
    fn embed_empty_sequence_is_zero_by_d() {
        let emb = Embedder::<f64>::hash_only(8, 1, 4);
        let m = embed_sequence(&TokenSequence::empty(), emb.table()).unwrap();
        assert_eq!(m.rows(), 0);
        assert_eq!(m.cols(), 8);
    }

    #[test]
    fn embed_unknown_token_names_id_and_position() {
        let emb = Embedder::<f64>::hash_only(8, 1, 2);
        let s = TokenSequence {
            tokens: vec![0, 9],
            text: String::new(),
        };
        match embed_sequence(&s, emb.table()).unwrap_err() {
            Error::OutOfVocabulary { id, position, .. } => {
                assert_eq!((id, position), (9, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
        // the total path falls back to a hash row instead
        let m = emb.embed(&s);
        assert_eq!(m.row(1), emb.fallback().row::<f64>(9).as_slice());
    }

    #[test]
    fn hash_rows_are_deterministic_and_unit_norm() {
        let h = HashEmbedder::new(16, 42);
        let a: Vec<f64> = h.row(7);
        let b: Vec<f64> = h.row(7);
        assert_eq!(a, b);
        for t in 0..100u32 {
            let r: Vec<f64> = h.row(t);
            assert!((norm2(&r) - 1.0).abs() < 1e-9, "token {t} not unit norm");
        }
    }

    #[test]
    fn different_seeds_give_different_rows() {
        let h1 = HashEmbedder::new(16, 1);
        let h2 = HashEmbedder::new(16, 2);
        let differs = (0..100u32).any(|t| h1.row::<f64>(t) != h2.row::<f64>(t));
        assert!(differs);
    }

    #[test]
    fn cooccurrence_separates_neighbours_from_strangers() {
        // a and b always co-occur (sharing neighbour x); c never appears
        // near either. Hand-derivable: row_a and row_b both count x's
        // feature, row_c only counts y's.
        let mut vocab = Vocab::new();
        let mut corpus = Vec::new();
        for _ in 0..5 {
            corpus.push(seq("a b x", &mut vocab));
        }
        for _ in 0..5 {
            corpus.push(seq("c y", &mut vocab));
        }
        let emb = Embedder::<f64>::hash_only(64, 3, vocab.len());
        let refreshed = cooccurrence_refresh(&corpus, emb.table(), 2, emb.fallback());

        let id = |t: &str| vocab.id(t).unwrap();
        let row = |t: &str| refreshed.row(id(t)).unwrap().to_vec();
        let cos = |u: &[f64], v: &[f64]| dot(u, v);
        let (ra, rb, rc) = (row("a"), row("b"), row("c"));
        assert!(cos(&ra, &rb) > cos(&ra, &rc));

        // independent hand count for row_a: neighbours b and x, 5 times each
        let feature = |t: &str| (mix64(id(t) as u64) % 64) as usize;
        let mut expect = vec![0.0f64; 64];
        expect[feature("b")] += 5.0;
        expect[feature("x")] += 5.0;
        normalize(&mut expect);
        for (got, want) in ra.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cooccurrence_copies_absent_tokens_and_increments_epoch() {
        let mut vocab = Vocab::new();
        let _ = seq("a b c", &mut vocab);
        let corpus = vec![seq("a b", &mut vocab)];
        let emb = Embedder::<f64>::hash_only(8, 9, vocab.len());
        let refreshed = cooccurrence_refresh(&corpus, emb.table(), 1, emb.fallback());
        assert_eq!(refreshed.epoch(), emb.table().epoch() + 1);
        let c = vocab.id("c").unwrap();
        assert_eq!(refreshed.row(c).unwrap(), emb.table().row(c).unwrap());
        // refreshed rows are unit norm
        let a = vocab.id("a").unwrap();
        assert!((norm2(refreshed.row(a).unwrap()) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_corpus_keeps_rows_but_bumps_epoch() {
        let emb = Embedder::<f64>::hash_only(8, 9, 3);
        let refreshed = cooccurrence_refresh(&[], emb.table(), 1, emb.fallback());
        assert_eq!(refreshed.epoch(), 1);
        for id in 0..3u32 {
            assert_eq!(refreshed.row(id).unwrap(), emb.table().row(id).unwrap());
        }
    }

    #[test]
    fn table_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.cdem");
        let table: EmbeddingTable<f64> = HashEmbedder::new(8, 5).table(10, 3);
        table.save(&path).unwrap();
        let loaded = EmbeddingTable::<f64>::load(&path).unwrap();
        assert_eq!(loaded, table);
        assert_eq!(loaded.epoch(), 3);
    }

    #[test]
    fn table_load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.cdem");
        std::fs::write(&path, b"NOPE00000000000000000000").unwrap();
        assert!(EmbeddingTable::<f64>::load(&path).is_err());
    }
}
