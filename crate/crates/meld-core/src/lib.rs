//! Core library for MELD: a mel-spectrogram discrete-latent autoregressive
//! speech-text model. Provides the DSP front end, tokenizer and unified
//! vocabulary, soft vector quantization, a tape-based autodiff engine, the
//! transformer model with its variational objectives, synthetic data
//! tooling, the trainer, decoding, and evaluation.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod text;
pub mod trainer;
pub mod vq;

pub use error::{MeldError, Result};
