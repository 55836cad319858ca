use fire_core::FireError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 1 config, 2 data, 3 numeric, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<FireError> for CliError {
    fn from(e: FireError) -> Self {
        match &e {
            FireError::InvalidArgument(_) | FireError::VariantMismatch(..) => CliError::Config(e.to_string()),
            FireError::Dimension { .. } | FireError::EmptyFragment(_) | FireError::Infeasible(_) => {
                CliError::Data(e.to_string())
            }
            FireError::Numeric(_) | FireError::NonFinite { .. } | FireError::ContractViolation(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => CliError::Io(io),
                other => CliError::Data(format!("{other:?}")),
            }
        } else {
            CliError::Data(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
