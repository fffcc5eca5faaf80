use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}: not a RIFF/WAVE file")]
    NotWav(PathBuf),
    #[error("{path}: unsupported encoding ({detail}); only 16-bit PCM is accepted")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("{path}: {channels} channels; only mono audio is accepted")]
    MultiChannel { path: PathBuf, channels: u16 },
    #[error("{0}: file contains no samples")]
    EmptyAudio(PathBuf),
    #[error("unsupported sample rate {0} Hz (expected 4000, 8000 or 16000)")]
    UnsupportedRate(u32),
    #[error("unsupported resampling ratio {from} Hz -> {to} Hz")]
    UnsupportedRatio { from: u32, to: u32 },
    #[error("audio too short: {len} samples, need at least {min}")]
    AudioTooShort { len: usize, min: usize },
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature map has no frames")]
    EmptyFeatureMap,
    #[error("batch normalization needs at least 2 values per channel in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("backward called on a graph without a recorded forward trace")]
    NoTrace,
    #[error("parameter {0} has no gradient")]
    NoGradient(String),
    #[error("zero-length vector cannot be compared by cosine similarity")]
    ZeroVector,
    #[error("trial set needs at least one positive and one negative trial")]
    DegenerateTrials,
    #[error("enrollment for speaker {0} has no audio")]
    EmptyEnrollment(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("speaker {0} is not in the class map")]
    UnknownSpeaker(String),
    #[error("training diverged at epoch {epoch} (loss is not finite); last good checkpoint: {last_good:?}")]
    Diverged { epoch: usize, last_good: Option<PathBuf> },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
