//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong while building approximations, running
/// chains, or solving for corrected covariances.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation (dimension mismatch, non-positive
    /// variance, malformed grid, chain too short, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A log-density or objective evaluation produced NaN where a finite
    /// value or -inf was required.
    #[error("non-finite evaluation: {0}")]
    NonFiniteEvaluation(String),

    /// The target log-density is -inf at the chain's initial state, so an
    /// IMH chain cannot be started there.
    #[error("target log-density is -inf at the initial state {0}")]
    NonFiniteTarget(f64),

    /// An acceptance rate fell outside the invertible range of the EAR
    /// table and could not be bracketed.
    #[error("acceptance rate {rate} is outside the table range [{min}, {max}]")]
    OutOfRange { rate: f64, min: f64, max: f64 },

    /// Even after extending the ratio grid, the observed acceptance rate
    /// stayed below the smallest tabulated EAR: the proposal is so far from
    /// the target that no variance ratio explains the chain.
    #[error("degenerate target: acceptance rate {rate} below extended table minimum {min}")]
    DegenerateTarget { rate: f64, min: f64 },

    /// An EAR grid was not strictly decreasing in the variance ratio.
    #[error("EAR table is not strictly decreasing at ratio {ratio}")]
    MonotonicityViolation { ratio: f64 },

    /// Too many VB samples fell outside the support of the target when
    /// fitting the affine correction.
    #[error(
        "{count} of {total} transformed samples fall outside the target support \
         ({stage}); the affine fit is unreliable"
    )]
    SampleOutsideSupport {
        count: usize,
        total: usize,
        stage: &'static str,
    },

    /// The optimizer left the feasible region or produced a non-finite
    /// objective it could not recover from.
    #[error("optimizer diverged: {0}")]
    OptimizerDiverged(String),

    /// The constrained maximization behind a profile log-density failed at
    /// some slice value — typically a support boundary or multimodality.
    #[error("profile maximization failed at slice value {omega}: {detail}")]
    ProfileDivergence { omega: f64, detail: String },

    /// The moment-system design matrix does not identify all variance and
    /// correlation unknowns.
    #[error("moment system is rank deficient: rank {rank} < {needed} unknowns")]
    RankDeficient { rank: usize, needed: usize },

    /// A solved marginal variance came out non-positive.
    #[error("solved variance for coordinate {index} is non-positive ({value})")]
    NegativeVariance { index: usize, value: f64 },

    /// Newton iteration on the partial-correlation system failed to reach
    /// the residual tolerance.
    #[error("partial-correlation solve did not converge: residual {residual} after {iterations} iterations")]
    NewtonDiverged { residual: f64, iterations: usize },

    /// A matrix that must be positive definite (for inversion or Cholesky)
    /// was not, and no recovery path applies.
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// The requested operation is not defined for this model kind.
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    /// Configuration file problems (syntax or semantics).
    #[error("configuration error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Convenience constructor for [`Error::InvalidParameter`].
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// Convenience constructor for [`Error::Io`] carrying path context.
    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(std::io::Error::other(msg.into()))
    }
}
