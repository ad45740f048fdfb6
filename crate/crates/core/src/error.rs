use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("cannot build tabular model: no {polarity} samples")]
    MissingPolarity { polarity: &'static str },

    #[error("degenerate trajectory: all checkpoints are identical")]
    DegenerateTrajectory,

    #[error("region {0:?} lies outside the crossbar")]
    Bounds(crate::xbar::Rect),

    #[error("{0}")]
    OutOfDevices(crate::xbar::OutOfDevices),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
