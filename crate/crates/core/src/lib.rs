//! Metadata-conditioned latent diffusion for satellite imagery, desk scale.
//!
//! The stack: a small convolutional VAE, a hash-vocabulary text-encoder stub,
//! a UNet denoiser conditioned on text (cross-attention) and on numerical
//! metadata (sinusoidal projection + per-field MLPs summed into the timestep
//! embedding), and a temporal control branch that conditions generation on
//! sequences of images with per-frame metadata. A procedural scene generator
//! makes the metadata pathways testable end to end without external data.

pub mod checkpoint;
pub mod config;
pub mod control;
pub mod data;
pub mod diffusion;
pub mod metadata;
pub mod metrics;
pub mod nets;
#[path = "train/mod.rs"]
pub mod train;

pub use config::{RunConfig, TaskKind};
pub use metadata::MetadataRecord;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data validation error: {0}")]
    Data(String),
    #[error("missing prerequisite: {0}")]
    Dependency(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 dependency,
    /// 4 data validation, 5 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dependency(_) => 3,
            Error::Data(_) | Error::Io { .. } | Error::Image(_) | Error::Serde(_) => 4,
            Error::Numerical(_) => 5,
        }
    }
}
