use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("step {t} outside [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(&'static str),
    #[error("invalid label field: {0}")]
    InvalidField(&'static str),
}
