use std::fmt;

use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar root, got shape {0}")]
    NonScalarRoot(Shape),

    #[error("non-finite {quantity} at timestep {timestep}")]
    NonFinite { timestep: usize, quantity: String },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::Config {
            field: field.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn non_finite(timestep: usize, quantity: impl Into<String>) -> Self {
        Error::NonFinite {
            timestep,
            quantity: quantity.into(),
        }
    }

    /// True for failures caused by the caller's input (bad files, bad config)
    /// rather than by the library itself.
    pub fn is_bad_input(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Decode(_) | Error::Image(_) | Error::Io(_) => true,
            Error::ShapeMismatch { .. } | Error::InvalidArgument(_) => true,
            Error::NonScalarRoot(_) | Error::NonFinite { .. } => false,
        }
    }
}
