//! Point tokenization, the point model and its training and evaluation.

pub mod config;
pub mod data;
pub mod downstream;
pub mod dvae;
pub mod error;
pub mod generation;
pub mod geometry;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod training;

pub use error::{GpmError, Result};
