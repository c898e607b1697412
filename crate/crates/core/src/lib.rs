//! Chunk prediction encoders: self-supervised contrastive pretraining of
//! long-document encoders by removing a chunk and scoring it against the
//! rest of its document, with hierarchical and sliding-window encoder paths,
//! frozen-embedding classification, and embedding-quality metrics.

pub mod checkpoint;
pub mod classifier;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod pooling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
