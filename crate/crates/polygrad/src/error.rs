//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A parameter value is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// An index or offset falls outside the valid range.
    #[error("out of bounds: {0}")]
    Bounds(String),
    /// A weight id referenced by the model is absent from the store.
    #[error("missing weight: {0}")]
    MissingWeight(String),
    /// A backward policy references layers the tape does not have.
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("unknown architecture '{0}'")]
    UnknownArch(String),
    /// Weight file violates the container format; offset points at the bad bytes.
    #[error("weight format error at byte {offset}: {msg}")]
    WeightFormat { offset: u64, msg: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    /// Attack or experiment configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),
    #[error("loss became non-finite")]
    NonFiniteLoss,
    /// The all-models-correct filter could not fill the requested eval set.
    #[error("eval set too small: requested {requested}, only {available} qualify")]
    EvalPool { requested: usize, available: usize },
    #[error("unknown sweep parameter '{0}'")]
    UnknownSweep(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
