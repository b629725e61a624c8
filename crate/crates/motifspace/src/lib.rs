//! Motif embeddings for symbolic music.
//!
//! The pipeline: parse MIDI into beat-quantized songs, cut songs into 1-bar
//! piano-roll chunks, expand each chunk into a set of motif-preserving
//! augmented views, train a Transformer chunk encoder (VICReg pretraining,
//! triplet fine-tuning), then evaluate embeddings by motif retrieval and
//! render per-song structure maps from clustered chunk embeddings.
//!
//! Everything downstream of parsing is deterministic given the seeds in the
//! run configuration; see [`rng`] for the draw protocol that makes runs
//! reproducible bit-for-bit.

pub mod augment;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod score;
pub mod synth;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
