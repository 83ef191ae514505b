use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel parameters: {0}")]
    InvalidKernelParams(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "covariance matrix is singular even with jitter epsilon = {jitter}; \
         increase the jitter or perturb coincident emission times"
    )]
    SingularCovariance { jitter: f64 },

    #[error("emission incompatible with message support (zero mass on the quadrature grid)")]
    EmissionIncompatible,

    #[error("tilted marginal degenerate (non-positive variance on the quadrature grid)")]
    DegenerateTilted,

    #[error("invalid grid specification: {0}")]
    InvalidGrid(String),

    #[error("no emissions supplied")]
    NoEmissions,

    #[error("coincident emission times at t = {0}; collapse or perturb them before grafting")]
    CoincidentTimes(f64),

    #[error("curve fitting requires unit amplitude (S = 1), got S = {0}")]
    AmplitudeNotUnit(f64),

    #[error("k too large: {k} folds requested for {n} emissions")]
    KTooLarge { k: usize, n: usize },

    #[error("cross validation needs k >= 2, got {0}")]
    KTooSmall(usize),

    #[error("empty bandwidth candidate set")]
    NoCandidates,
}
