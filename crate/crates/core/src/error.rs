use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e} vs norm {norm:.3e}); symmetrize upstream")]
    NotSymmetric { asymmetry: f64, norm: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("empty sample")]
    EmptySample,

    #[error("effective sample size {ess:.2} below {min_ess} at t = {t:.4e}")]
    LowEffectiveSampleSize { ess: f64, min_ess: f64, t: f64 },

    #[error("oracle lacks the {0} capability")]
    MissingCapability(&'static str),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("bound is vacuous: m_min = {m_min} must exceed 1/2")]
    VacuousBound { m_min: f64 },

    #[error("{failed} of {total} trajectories failed; first failure: {first}")]
    BatchFailed {
        failed: usize,
        total: usize,
        first: Box<Error>,
    },
}
