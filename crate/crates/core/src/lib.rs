//! Desk-scale laboratory for studying virtual-to-real transfer in object
//! detection.
//!
//! The crate contains everything needed to reproduce the effect on a laptop:
//! a seeded procedural scene generator with a controllable domain gap
//! ([`synth`]), a miniature convolutional grid detector with reverse-mode
//! gradients and per-segment weight transfer and freezing ([`net`]), the
//! composite detection loss built on CIoU box regression ([`geometry`],
//! [`loss`]), mAP evaluation ([`eval`]), and named multi-stage transfer
//! schemes ([`schemes`]).

// Pixel and channel loops index several arrays with one counter; the
// enumerate form hides the addressing instead of clarifying it.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod loss;
pub mod net;
pub mod rng;
pub mod schemes;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
