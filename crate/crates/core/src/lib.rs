//! Mixture-of-experts label distribution learning for probabilistic
//! time-series forecasting.
//!
//! Point labels are turned into target distributions ([`enhance`]), a gated
//! mixture of recurrent experts emits per-step Gaussian mixtures or
//! categoricals ([`moe`], [`pattern`]), and training minimises a kernel
//! distance between the two plus routing regularisers ([`dist`], [`train`]).
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command-line interface and anything touching the OS live in the `ldlmoe`
//! companion crate.
#![no_std]
#![warn(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod dist;
pub mod enhance;
pub mod gradcheck;
pub mod error;
pub mod kdtree;
pub mod linalg;
pub mod moe;
pub mod nn;
pub mod optim;
pub mod pattern;
pub mod rng;
pub mod series;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
