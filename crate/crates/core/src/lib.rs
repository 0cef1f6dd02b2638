//! Turn a raw document collection into a small, representative and diverse
//! synthetic training set for neural rankers.
//!
//! The pipeline runs in stages, each with its own module:
//!
//! 1. [`corpus`]: load and length-filter a BEIR-style JSONL collection.
//! 2. [`embed`]: read externally produced embeddings (or hash-embed for tests).
//! 3. [`cluster`]: spherical k-means with k-means++ seeding and an elbow scan.
//! 4. [`select`]: stratified per-cluster budgets, softmax sampling and MMR.
//! 5. [`querygen`]: few-shot prompts and one LLM query per selected document.
//! 6. [`mine`]: BM25 index and bottom-of-top-x hard negatives.
//! 7. [`dataset`]: triples TSV, pointwise JSONL and a reproducibility manifest.
//!
//! [`eval`] scores TREC runs with nDCG@k and recall@k, and [`pipeline`] wires
//! the stages together behind [`config::PipelineConfig`].
//!
//! The numeric modules are generic over [`Scalar`]; the aliases below fix the
//! precision used by the on-disk formats.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod mine;
pub mod pipeline;
pub mod querygen;
pub mod scalar;
pub mod select;
pub mod text;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Embeddings as stored on disk.
pub type Embeddings = embed::EmbeddingMatrix<f32>;
/// Double-precision embeddings, used where oracles need the extra digits.
pub type Embeddings64 = embed::EmbeddingMatrix<f64>;
/// K-means model over single-precision embeddings.
pub type KMeansModel = cluster::KMeansModel<f32>;
/// K-means model over double-precision embeddings.
pub type KMeansModel64 = cluster::KMeansModel<f64>;
