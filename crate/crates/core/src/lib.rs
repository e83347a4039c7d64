//! Noisy-label training pipeline: contrastive pretraining, supervised warmup
//! and stage-scheduled pseudo-label refinement, plus a synthetic
//! instance-dependent noise generator whose ledger serves as ground truth.

pub mod augment;
pub mod config;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod image;
pub mod linalg;
pub mod model;
pub mod pretrain;
pub mod refinery;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
