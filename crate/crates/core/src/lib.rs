//! Evidential smoke-severity classification, desk scale.
//!
//! A 4-channel (R, G, B, spectral proxy) patch is scored by a small CNN with
//! a CBAM attention block and a Dirichlet evidence head that yields class
//! probabilities plus decomposed uncertainty (vacuity and dissonance) in a
//! single forward pass. The crate also carries the pseudo-AOD labeling
//! heuristic, a synthetic scene generator with degradation transforms, and
//! the full evaluation suite (calibration, rank correlation, selective
//! prediction, bootstrap intervals, sliding-window uncertainty maps).
//!
//! The crate is `no_std + alloc`; all file formats and the CLI live in the
//! companion `evsev` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cbam;
pub mod evidential;
pub mod labeling;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod special;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use tensor::{NnError, Tensor};
