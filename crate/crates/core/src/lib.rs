//! Learning-to-rank workbench.
//!
//! Feature embedding, Two-Tower / Cross-Encoder / listwise Transformer
//! rankers trained with multi-positive RankNet or Softmax cross-entropy
//! losses, a from-scratch LambdaMART baseline, NDCG/AIV evaluation and
//! Welch t-test analysis, all runnable on seeded synthetic interaction
//! logs.

pub mod artifact;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod gbdt;
pub mod io_util;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rankers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
