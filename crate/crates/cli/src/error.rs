use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] dpbilevel::Error),

    #[error(transparent)]
    Oracle(#[from] dpbilevel_oracles::OracleError),

    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const BUDGET: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

fn core_class(e: &dpbilevel::Error) -> (&'static str, i32) {
    use dpbilevel::Error as E;
    match e {
        E::BudgetExceeded { .. } => ("budget_exceeded", exit::BUDGET),
        E::NonFinite(_) | E::Numerical(_) => ("numerical", exit::NUMERICAL),
        E::Io(_) => ("io", exit::OTHER),
        _ => ("invalid_config", exit::CONFIG),
    }
}

impl CliError {
    /// Machine-readable class and exit code.
    pub fn class(&self) -> (&'static str, i32) {
        use dpbilevel_oracles::OracleError as O;
        match self {
            CliError::Config(_) | CliError::Json(_) => ("invalid_config", exit::CONFIG),
            CliError::Core(e) | CliError::Oracle(O::Core(e)) => core_class(e),
            CliError::Oracle(O::NotConverged { .. }) => ("numerical", exit::NUMERICAL),
            CliError::Oracle(O::MissingSecondOrder(_) | O::MissingValues(_)) => ("invalid_config", exit::CONFIG),
            CliError::Oracle(_) | CliError::Write { .. } => ("io", exit::OTHER),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().1
    }

    pub fn report(&self) -> ErrorReport {
        let (kind, exit_code) = self.class();
        ErrorReport { error: ErrorBody { kind: kind.to_string(), message: self.to_string(), exit_code } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

/// `{"error": {"kind", "message", "exit_code"}}`
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub error: ErrorBody,
}
