use thiserror::Error;

pub type Result<T> = std::result::Result<T, FireError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FireError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("fragment `{0}` is empty")]
    EmptyFragment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fisher variant mismatch: {0} vs {1}")]
    VariantMismatch(&'static str, &'static str),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl FireError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FireError::InvalidArgument(msg.into())
    }

    /// True for failures of the numerics rather than of the caller's inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FireError::Numeric(_) | FireError::NonFinite { .. } | FireError::ContractViolation(_)
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FireError::Dimension { expected, got })
    }
}
