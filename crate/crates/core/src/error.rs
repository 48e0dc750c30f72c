use alloc::string::String;
use alloc::vec::Vec;

use crate::Real;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} of negative value {value}")]
    Domain { op: &'static str, value: Real },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("memory has shape {got:?}, expected {expected:?}")]
    MemoryDim { got: Vec<usize>, expected: Vec<usize> },
    #[error("cache holds {cached} positions but the step is at position {position}")]
    CacheMismatch { cached: usize, position: usize },
    #[error("sequence length limit {0} reached")]
    Overflow(usize),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("current-token memory requested without a first-pass state")]
    MissingFirstPass,
    #[error("{0}")]
    WrongMemoryKind(&'static str),
    #[error("empty evaluation record")]
    EmptyRecord,
    #[error("data error: {0}")]
    Data(String),
    #[error("malformed tensor encoding: {0}")]
    Decode(String),
}
