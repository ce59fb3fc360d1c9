//! Embedding-gated convolutional text regression with cross-domain
//! relationship learning.
//!
//! The crate encodes reviews through stacked word / character / aspect
//! representations, weights each word with a learned scalar gate, runs a
//! multi-width convolution bank with max-over-time pooling, and predicts a
//! helpfulness score in `[0, 1]` through a shared head plus per-domain
//! heads. Domain relatedness is learned jointly as a symmetric PSD,
//! unit-trace correlation matrix that regularizes the per-domain heads.
//!
//! See the `examples/` directory for runnable walkthroughs of each
//! capability and the `egcnn` binary for the file-based pipeline.

pub mod aspects;
pub mod autodiff;
pub mod error;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod cli;
pub mod linalg;
pub mod model;
pub mod text;
