use thiserror::Error;

use crate::align::AlignError;
use crate::compressor::CompressorError;
use crate::ctc::CtcError;
use crate::modality::ModalityError;
use crate::numerics::NumericsError;

/// Crate-level error for model assembly, training, data and CLI code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Compressor(#[from] CompressorError),
    #[error(transparent)]
    Modality(#[from] ModalityError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
