//! Diagnostics and corrections for the covariance structure of variational
//! Bayes (VB) posterior approximations.
//!
//! Mean-field VB tends to underestimate posterior variances and discards
//! posterior correlations. This crate measures and repairs both, using the
//! acceptance rate of an independence Metropolis–Hastings (IMH) chain whose
//! proposal is the VB approximation: for a normal target N(0, v) and a normal
//! proposal N(0, 1) with a common mean, the stationary expected acceptance
//! rate (EAR) is a strictly decreasing function of the variance ratio v, so
//! an observed acceptance rate can be inverted into a variance estimate.
//!
//! Three correction methods are provided:
//!
//! * [`affine`] — fit an affine map `θ = Aη + B` of VB samples by maximum
//!   likelihood under the true (unnormalized) posterior; the corrected
//!   covariance is `A · diag(var_q) · Aᵀ`.
//! * [`marginal`] — read the variance of one-dimensional projections `αᵀθ`
//!   from IMH acceptance rates against a profile-likelihood approximation of
//!   the projected marginal, then solve a linear moment system for the full
//!   covariance.
//! * [`stepwise`] — read conditional variances coordinate by coordinate,
//!   rescale, then read rotated pairwise slices to recover partial
//!   correlations and invert them into a correlation matrix.
//!
//! All stochastic paths are driven by an explicit [`rng::RngPolicy`]
//! (seed + stream), so every result is reproducible bit for bit and
//! independent of thread scheduling.

pub mod affine;
pub mod config;
pub mod covariance;
pub mod error;
pub mod family;
pub mod imh;
pub mod marginal;
pub mod model;
pub mod models;
pub mod numdiff;
pub mod optimize;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod stepwise;
pub mod vb;

pub use covariance::{CovarianceEstimate, MethodTag};
pub use error::Error;
pub use family::MarginalFamily;
pub use imh::{EarTable, VbaimhDiagnosis};
pub use model::TargetModel;
pub use rng::RngPolicy;
pub use vb::VbApproximation;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
