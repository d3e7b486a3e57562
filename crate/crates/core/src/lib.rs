//! Siamese sleep transformer toolkit.
//!
//! A dual-input transformer that scores sequences of 30-second single-channel
//! EEG epochs into five sleep stages (W, N1, N2, N3, REM). The crate contains
//! everything needed to train it from scratch on a CPU:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors with tape-based reverse-mode
//!   differentiation, plus [`optim`] (global-norm clipping, Adam).
//! - [`model`]: the weight-shared CNN front end, cross-attention and sequential
//!   encoder stacks, MLP head, and the checkpoint format.
//! - [`losses`]: label smoothing, cosine feature alignment and the
//!   temperature-scaled self-distillation KL term.
//! - [`sampling`]: balanced anchors, label-matched companions and the
//!   easy/difficult sampling memory.
//! - [`data`]: EDF/EDF+ parsing and writing, TAL hypnograms, epoching,
//!   rational resampling and a synthetic generator.
//! - [`train`]: the training loop with early stopping, validation, transfer
//!   evaluation, metrics and the repeated-run variance experiment.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Number of sleep stages scored.
pub const N_CLASSES: usize = 5;

/// Stage names indexed by class id.
pub const STAGE_NAMES: [&str; N_CLASSES] = ["W", "N1", "N2", "N3", "REM"];
