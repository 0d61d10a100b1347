//! Desk-scale laboratory for guided contrastive pre-training of small
//! transducer ASR models on synthetic phone-sequence data.
//!
//! The crate provides:
//! - `numcore`: reverse-mode autodiff over f64 tensors, Adam, and a
//!   finite-difference gradient oracle;
//! - `nets`: encoder / context / guidance networks, step heads, a phone
//!   classifier, and transducer components;
//! - `losses`: InfoNCE-style contrastive losses (plain and guided), frame
//!   cross-entropy, and the transducer loss with a brute-force oracle;
//! - `synthdata`: a deterministic synthetic phone-sequence corpus generator
//!   with a binary dataset format;
//! - `pipeline`: pre-training schemes, encoder initialization, fine-tuning,
//!   and the scheme-comparison grid;
//! - `eval`: greedy decoding, WER with substitution/insertion/deletion
//!   breakdown, PCA projection, and a class-separation metric;
//! - `cli`: configuration, checkpoint persistence, and the command-line
//!   frontend.

pub mod error;
pub mod numcore;
pub mod pipeline;
pub mod seeds;
pub mod synthdata;

pub mod eval;
pub mod losses;
pub mod nets;
pub mod cli;

pub use error::{Error, Result};
