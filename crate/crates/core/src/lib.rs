//! Zero-shot carbon flux upscaling with task-aware modulated LSTMs.
//!
//! The crate trains a modulated LSTM decoder whose input and hidden states
//! are conditioned on a site embedding computed from a small support set of
//! that site's history, together with the two unmodulated baselines used for
//! comparison. Everything runs on a small `f64` reverse-mode tape.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
