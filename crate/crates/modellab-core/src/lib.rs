//! Desk-scale multimodal transformer laboratory.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! dense f32 tensors with reverse-mode autodiff on an explicit tape, token
//! layouts and attention masking regimes, modality-routed attention, a small
//! frozen vision encoder with multi-depth feature taps, a pre-norm language
//! model, two-stage training on a synthetic grid task, logit-lens probes, and
//! parameter/FLOP accounting with explicit counting conventions.
//!
//! The crate is `no_std` + `alloc`. File formats, the CLI, and worker threads
//! live in the `modellab` companion crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod lens;
pub mod masking;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
