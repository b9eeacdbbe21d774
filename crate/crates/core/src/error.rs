use alloc::string::String;

/// Errors raised by the synthesis, evaluation and augmentation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("mask is degenerate (zero estimated diameter)")]
    DegenerateMask,
    #[error("rescaled shape of {height}x{width} does not fit a {canvas}x{canvas} canvas")]
    ShapeTooLarge {
        height: usize,
        width: usize,
        canvas: usize,
    },
    #[error("latent vector has length {got}, expected {expected}")]
    BadLatentDim { expected: usize, got: usize },
    #[error("score batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no ground-truth box in any record")]
    NoGroundTruth,
    #[error("detector has not been fitted or loaded")]
    NotFitted,
    #[error("every ground-truth nodule was detected")]
    NoMissedNodules,
    #[error("attribute distribution has no sample")]
    EmptyDistribution,
    #[error("no valid crop location found after {attempts} attempts")]
    NoValidCropLocation { attempts: usize },
    #[error("window at ({y}, {x}) of size {size} exceeds a {height}x{width} image")]
    OutOfBounds {
        y: isize,
        x: isize,
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter `{0}` missing or malformed")]
    BadParameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;
