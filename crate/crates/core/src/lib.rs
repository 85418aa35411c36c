//! Metric-based few-shot learners over precomputed token embeddings.
//!
//! The crate covers the numeric core (tensors, reverse-mode autodiff,
//! finite-difference checks, optimizers), the token-vector collection format
//! with domain-disjoint splits, episode sampling, the four learners, and the
//! episodic training, evaluation and experiment-grid loops.

pub mod data;
pub mod episodes;
pub mod fsio;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod models;
pub mod optim;
pub mod parallel;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;

pub use graph::{Gradients, Graph, NodeId, Padding};
pub use tensor::{Tensor, TensorError};
