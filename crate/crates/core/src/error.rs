use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value outside its admissible domain.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Input data that violates a structural requirement.
    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    /// Conditional variance vanished for a node of the neighbor graph.
    #[error("degenerate conditional variance {value:e} at node {node}")]
    Degenerate { node: usize, value: f64 },

    /// A chain segment without variability.
    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A value outside the domain of the Box-Cox transform or its inverse.
    #[error("transform domain error: {0}")]
    Domain(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
