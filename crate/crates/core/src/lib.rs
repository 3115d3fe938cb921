//! Self-supervised representation learning for multi-sensor neural time series.
//!
//! The crate covers the whole experimental loop: preprocessing of raw
//! recordings, three pretext transforms (band-stop, phase shift, amplitude
//! scaling) whose parameters become implicit class labels, a convolutional
//! encoder trained on those labels with a small reverse-mode autodiff engine,
//! and shallow/deep fine-tuning with balanced-accuracy evaluation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretext;
pub mod rng;
pub mod train;
pub mod types;

pub use error::{Error, Result};
