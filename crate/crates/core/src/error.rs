use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A K-L divergence is zero, infinite, or the quadrature did not converge.
    #[error("divergence not admissible: {0}")]
    Divergence(String),

    #[error("detector already stopped at k = {0}")]
    Stopped(u64),

    #[error("inconsistent censoring outcome: {0}")]
    InconsistentObservation(&'static str),

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error(
        "threshold bracket failure for ARLFA target {zeta}: {probes} probes, best a = {best_a}"
    )]
    BracketFailure {
        zeta: f64,
        probes: usize,
        best_a: f64,
    },

    #[error("unbounded: {0}")]
    Unbounded(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
