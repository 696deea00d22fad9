//! Continual learning with a progressively expanded simplex ETF target.
//!
//! A small MLP maps inputs to unit features. After the first task the
//! features' class means are snapped to the nearest equiangular tight frame;
//! each later task grows that frame by one vertex per new class and trains
//! with cross-entropy, alignment to the frame and distillation from the
//! previous model, replaying a reservoir-sampled buffer.

pub mod cli;
pub mod data;
pub mod engine;
mod error;
pub mod etf;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
