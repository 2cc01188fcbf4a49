//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced by construction, validation, solvers, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A graph kernel failed validation (shape, symmetry, signs, connectivity).
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    /// A spatial domain description failed validation.
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    /// A field's shape or values are incompatible with the requested operation.
    #[error("invalid field: {0}")]
    InvalidField(String),

    /// A scalar parameter is out of its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A structural assumption on the mobility or the data does not hold.
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    /// The transport problem admits no coupling with finite cost.
    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    /// An iterative solver failed to reach its tolerance or produced
    /// non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A run configuration is semantically invalid.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV (de)serialization failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code the command-line tool reports for this error:
    /// 3 for numerical failures (including infeasible transport),
    /// 2 for everything else (bad input, bad configuration, I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Infeasible(_) | Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

/// Convenient alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_distinguish_numerical_failures() {
        assert_eq!(Error::Numerical("nan".into()).exit_code(), 3);
        assert_eq!(Error::Infeasible("mass".into()).exit_code(), 3);
        assert_eq!(Error::Config("bad".into()).exit_code(), 2);
        assert_eq!(Error::InvalidGraph("asym".into()).exit_code(), 2);
    }

    #[test]
    fn errors_have_readable_messages() {
        let e = Error::InvalidGraph("kernel must be symmetric".into());
        assert!(e.to_string().contains("symmetric"));
    }
}
