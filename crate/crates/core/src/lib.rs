//! Japanese Tacotron variants with forward attention, self-attention and
//! vocoder-parameter targets, built on a small float64 autodiff engine.
//!
//! * [`numerics`]: tensors, gradient tape, layers, Adam.
//! * [`attention`]: additive, forward, multi-head and dual-source attention.
//! * [`features`]: toy pitch-accent corpus, mel extraction, F0 quantization.
//! * [`model`]: encoder/decoder, losses, training and decoding modes.
//! * [`evaluation`]: alignment diagnosis, F0 metrics, attention statistics.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
