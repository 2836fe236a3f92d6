//! Multi-granularity video-text alignment over precomputed embeddings.
//!
//! Videos arrive as per-frame embedding matrices and classes as token-level
//! text embeddings (a global prompt plus several sub-texts describing atomic
//! actions). The crate scores sub-text sets, aggregates frames at coarse and
//! fine granularity, trains the small learnable heads with InfoNCE, and
//! evaluates the result.

pub mod alignment;
pub mod embedding_store;
pub mod error;
pub mod eval;
pub mod subtext_metrics;
pub mod training;

pub use error::{Error, Result};
