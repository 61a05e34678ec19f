//! Belief-state laboratory: HMM-like generative models with exact filters,
//! a small dense RNN/Transformer engine with hand-written gradients, explicit
//! weight constructions for belief tracking, and the training/evaluation loop.

pub mod constructions;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod model_zoo;
pub mod nn_core;
pub mod rng;
pub mod textfmt;
pub mod training;

pub use error::{Error, Result};
