use thiserror::Error;

/// Errors produced by the numerical routines and file readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive semidefinite: eigenvalue {eigenvalue:e} below -{cutoff:e}")]
    NotPsd { eigenvalue: f64, cutoff: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("regularization must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("operator has rank zero")]
    ZeroRank,

    #[error("dense size {size} exceeds cap {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("invalid rank policy: rel_tol={rel_tol}, abs_tol={abs_tol}")]
    InvalidPolicy { rel_tol: f64, abs_tol: f64 },

    #[error("invalid sketch spec: {0}")]
    InvalidSpec(String),

    #[error("sketch/curvature family mismatch: {0}")]
    FamilyMismatch(String),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("parameter out of range: {0}")]
    OutOfRangeParam(String),

    #[error("lambda {lambda} exceeds |A|*|E| = {limit}")]
    LambdaTooLarge { lambda: f64, limit: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("probe preconditions violated: {0}")]
    RegimeViolation(String),

    #[error("no calibration constant up to {max} passes")]
    CalibrationFailed { max: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            context,
            expected,
            found,
        })
    }
}
