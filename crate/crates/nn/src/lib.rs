//! Minimal reverse-mode differentiable tensor runtime: the operations a
//! point-cloud tokenizer and transformer need, finite-difference checking,
//! AdamW, and a binary checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod graph;
pub mod gumbel;
pub mod ops;
pub mod optim;
pub mod params;
mod real;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use gumbel::{gumbel_noise, gumbel_softmax};
pub use ops::ChamferNorm;
pub use optim::{cosine_schedule, AdamW, AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
