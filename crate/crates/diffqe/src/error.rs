use std::fmt;

/// Library-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Mismatched dimensions between operands (planes, vectors, feature maps).
    Shape(String),
    /// A scalar argument outside its documented range (qp, timestep, ratios).
    Range(String),
    /// Produced or encountered a NaN/Inf where a finite value is required.
    NonFinite(String),
    /// Configuration problem: bad key, unparsable value, missing requirement.
    Config(String),
    /// Checkpoint container problems (bad magic, version, config mismatch).
    Checkpoint(String),
    /// Dataset manifest parse/consistency problems.
    Manifest(String),
    /// External encoder invocation failures.
    Codec(String),
    Io(std::io::Error),
    /// Image decode/encode failures.
    Image(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Range(m) => write!(f, "out of range: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Manifest(m) => write!(f, "manifest error: {m}"),
            Error::Codec(m) => write!(f, "codec error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Image(m) => write!(f, "image error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
