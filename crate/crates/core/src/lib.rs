//! Graph network over dynamically erased similarity adjacency matrices.
//!
//! Patches of a feature map become graph nodes. Each block splits the patch
//! channels into two branches; every branch builds a row-softmax attention
//! matrix between patches, erases all entries not strictly above a chosen
//! percentile, and propagates features along the surviving edges. A small
//! perceptron merges the branches.
//!
//! Everything is differentiable through [`autograd::Tape`], a reverse-mode
//! engine over dense `f64` tensors. The [`harness`] module trains and
//! evaluates the network on synthetic re-identification data.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sasamg;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
