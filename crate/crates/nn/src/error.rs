use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
    #[error("backward called on a value that does not depend on any trainable input")]
    Detached,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
