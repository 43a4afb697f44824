//! Per-sample test-time adaptation of a normalization-layer affine transform.
//!
//! Every incoming sample gets its own support set retrieved from a class-split
//! FIFO memory. Each memory entry caches the sample's embedding together with
//! its entropy gradient at the pretrained parameters, so adapting to a support
//! set is a weighted sum of cached gradients followed by a single optimizer
//! step. The model is reset after every prediction.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, timing, and the
//! command line live in the companion `ramen` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adapter;
pub mod analysis;
pub mod datagen;
mod error;
pub mod memory;
pub mod model;
pub(crate) mod vecops;

pub use adapter::{
    aggregate, entmin_baseline, gd_step, signsgd_step, zero_shot_baseline, AdaptOutcome,
    GradientSource, Optimizer, Ramen, RamenConfig,
};
pub use error::{Error, Result};
pub use memory::{ClassMemory, MemoryEntry, MemoryMode, SupportItem, SupportSet};
pub use model::{
    batch_grads, finite_diff_grad, forward, predict, predict_and_grad, sample_grad, AffineParams,
    GradRecord, Prediction, Sample, TextBank,
};

/// Tolerance on `||v|| - 1` accepted by constructors of unit-norm data.
pub const UNIT_NORM_TOL: f64 = 1e-9;
