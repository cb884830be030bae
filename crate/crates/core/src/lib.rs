//! Few-shot classifier adaptation on pre-extracted features with a
//! Gaussian-process calibrated cache model.
//!
//! The crate is organized bottom-up:
//!
//! * [`bundle`] reads, writes and generates feature bundles.
//! * [`kernel`] and [`calibration`] define the similarity used by the cache.
//! * [`cache`] builds the cache model and produces logits.
//! * [`approx`] holds the cheaper approximations and their benchmark.
//! * [`trainer`] fine-tunes cache keys, [`tuner`] grid-searches hypers.
//! * [`cli`] wires everything into the `gpcache` binary.

pub mod approx;
pub mod bundle;
pub mod cache;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod trainer;
pub mod tuner;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
