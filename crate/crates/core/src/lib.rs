//! Training-dynamics laboratory for a one-layer softmax-attention
//! classifier on group-sparse data.
//!
//! The crate generates group-sparse Gaussian data with sine positional
//! encodings, trains the attention model by gradient descent from zero
//! initialization, fine-tunes it with online SGD on a margin-separable
//! downstream task, and measures the structural quantities that the
//! training theory predicts (zero off-diagonal blocks, rank-one `W`
//! blocks, attention concentration on the label-relevant group,
//! `t^{1/3}` growth of the value-vector projection).

pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod svg;
pub mod train;

pub use error::{CheckpointError, Error, Result};
