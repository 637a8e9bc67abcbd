//! Self-learning engine: contrastive distillation through fine-tuning and
//! through episodic memory, with a built-in trainable toy solver.
//!
//! The numeric core (embeddings, memory keys, PCA sampling, losses, the
//! trigram solver) is generic over [`scalar::Scalar`]; the engine and CLI
//! work with the f64 aliases below.

pub mod agent;
pub mod bench;
pub mod dataio;
pub mod distill;
pub mod embedding;
pub mod error;
pub mod hash;
pub mod matrix;
pub mod memory;
pub mod oracle;
pub mod retrieval;
pub mod scalar;
pub mod solver;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tokenizer::{TokenSequence, Vocab};

/// Scalar type used by the engine and CLI.
pub type DefaultScalar = f64;

/// Concrete instantiations of the scalar-generic core.
pub type DefaultTable = embedding::EmbeddingTable<DefaultScalar>;
pub type DefaultEmbedder = embedding::Embedder<DefaultScalar>;
pub type DefaultStore = memory::MemoryStore<DefaultScalar>;
pub type DefaultSolver = solver::TrigramSolver<DefaultScalar>;
