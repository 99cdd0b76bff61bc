use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("under-identified model: {observations} observations for {parameters} parameters")]
    UnderIdentified { observations: usize, parameters: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("address {0} does not belong to any locality")]
    UnknownAddress(u32),

    #[error("unknown locality {0}")]
    UnknownLocality(usize),

    #[error("infeasible benchmark targets: {0}")]
    Infeasible(String),

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("negative count {value} in locality {locality}")]
    NegativeCount { locality: usize, value: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
