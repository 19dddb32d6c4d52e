//! f-divergence losses for weak-to-strong training.
//!
//! - [`probdist`]: probability vectors, softmax, clamping, hardening.
//! - [`divergence`]: the seven f-divergences, gradients, disagreement.
//! - [`synth`]: synthetic tasks, splits, label noise, CSV I/O.
//! - [`nnet`]: backbone + head predictors, losses, Adam, checkpoints.
//! - [`w2sg`]: teacher/student training, auxiliary loss, evaluation.
//! - [`theory`]: limit inequality, Pinsker search, tilted distributions.
//! - [`verify`] and [`experiment`]: property suites and grid sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod divergence;
pub mod error;
pub mod experiment;
pub mod nnet;
pub mod probdist;
pub mod rng;
pub mod synth;
pub mod theory;
pub mod verify;
pub mod w2sg;

pub use divergence::DivergenceKind;
pub use error::{Error, Result};
pub use nnet::{Loss, ModelPredictor};
pub use probdist::{Logits, ProbVector};
