//! Voiceprint restoration from voice-converted audio.
//!
//! The pipeline turns a waveform into log-Mel features, runs a dilated TDNN extractor, optionally
//! removes the evidence-speaker direction with an orthogonal rectification block, pools the result
//! into a fixed-length voiceprint and scores voiceprints by cosine similarity.

pub mod audio;
pub mod channel;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod embedder;
pub mod extractor;
pub mod features;
pub mod manifest;
pub mod model;
pub mod netgrad;
pub mod rectifier;
pub mod toyvc;
pub mod trainer;

pub use error::{Error, Result};
