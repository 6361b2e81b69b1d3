use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("resampling would change aspect ratio ({in_h}x{in_w} -> {out_h}x{out_w}); a single GSD cannot represent anisotropic scale")]
    AnisotropicResample {
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },

    #[error("image {h}x{w} is smaller than crop {size}; resample the image first")]
    CropTooLarge { h: usize, w: usize, size: usize },

    #[error("image side {side} is not divisible by patch size {patch}; pad by {pad} pixels")]
    NotDivisible { side: usize, patch: usize, pad: usize },

    #[error("mask ratio {ratio} leaves no visible patches out of {n}")]
    NoVisiblePatches { n: usize, ratio: f64 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("checkpoint format version mismatch: file has {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch in {path}")]
    CheckpointChecksum { path: PathBuf },

    #[error("checkpoint scalar type is {found}, expected {expected}")]
    CheckpointScalar { found: String, expected: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{key}`; valid keys: {valid}")]
    UnknownConfigKey { key: String, valid: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
