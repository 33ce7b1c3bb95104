//! Error type shared by all modules of the crate.

/// Errors reported by model construction, path operations, solvers and
/// estimators.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input vector or matrix did not have the expected dimension.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A matrix that must be invertible (or positive definite) is not.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A state, gradient or weight became NaN or infinite.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// An operation required path deviations but the path carries none.
    #[error("path carries no deviation samples")]
    MissingDeviations,

    /// A verification step required adjoint/multiplier data that the
    /// solution does not carry.
    #[error("solution carries no adjoint or multiplier data")]
    MissingAdjoint,

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every multi-start attempt failed to produce a usable solution.
    #[error("all solver starts failed")]
    AllStartsFailed,
}

pub type Result<T> = std::result::Result<T, Error>;
