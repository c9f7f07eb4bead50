use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid dimensions {width}x{height}")]
    Dimensions { width: usize, height: usize },

    #[error("degenerate normal at texel ({x}, {y}): z = {z}")]
    DegenerateNormal { x: usize, y: usize, z: f64 },

    #[error("unsupported resolution {0}: must be a power of two >= 256")]
    UnsupportedResolution(usize),

    #[error("footprint escapes the non-tileable map on the {0} side")]
    FootprintOutOfBounds(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value in input tensor")]
    NonFinite,

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("checksum mismatch in section {section}")]
    Checksum { section: u32 },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
