//! Multi-task lesion segmentation + classification at desk scale.
//!
//! The crate builds a five-stage encoder / four-level decoder network in
//! which the two task heads talk to each other at every decoder level:
//! task-interaction modules exchange features in both directions,
//! an uncertainty proxy derived from feature-activation variance decides
//! per sample how much of the exchanged signal to keep, and multi-scale
//! fusion plus attention-gated skips shape the encoder features. Everything
//! runs on a small f64 reverse-mode autodiff engine so every gradient can be
//! checked against finite differences.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, UpsampleMode, Value};
pub use nn::{Mode, ParamId, ParamStore, Session};
pub use rng::Rng;
pub use tensor::Tensor;
