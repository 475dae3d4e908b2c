//! Semi-conjugate normal model: a `N(μ, σ²)` likelihood with independent
//! `N(γ, η²)` prior on the mean and `IG(α, β)` prior on the variance.
//!
//! The joint posterior over `θ = (μ, σ²)` is
//!
//! ```text
//! log p(μ, σ² | y) = −(n/2 + α + 1)·log σ²
//!                    − (S²/2 + β + n(μ − ȳ)²/2) / σ²
//!                    − (μ − γ)² / (2η²)          (up to a constant)
//! ```
//!
//! with `S² = Σ(yᵢ − ȳ)²` the centered sum of squares. The prior is not
//! conjugate jointly, but both full conditionals are closed-form, which
//! yields an exact Gibbs sampler (the reference oracle) and closed-form
//! coordinate-ascent updates for a factorized `q(μ)q(σ²)` fit with
//! `q(μ)` normal and `q(σ²)` inverse-gamma. The factorized fit is the
//! classic example of posterior-variance underestimation when the data
//! mean and the prior location disagree: the true posterior then couples
//! μ and σ² positively, and a mean-field fit cannot represent that.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceEstimate, MethodTag, MomentAccumulator};
use crate::error::Error;
use crate::family::MarginalFamily;
use crate::imh::DEFAULT_BURN_IN;
use crate::model::TargetModel;
use crate::rng::RngPolicy;
use crate::vb::VbApproximation;
use crate::Result;

/// Absolute movement of both variational means below which coordinate
/// ascent is declared converged.
pub const CAVI_TOL: f64 = 1e-10;
/// Hard cap on coordinate-ascent sweeps (convergence is monotone for this
/// model; the cap only guards against pathological inputs).
pub const CAVI_MAX_ITERS: usize = 10_000;
/// Smallest Gibbs run accepted for covariance estimation.
pub const MIN_GIBBS_ITERS: usize = 10_000;

/// Data summary and hyperparameters of the semi-conjugate normal model.
///
/// Only the sufficient statistics `(n, ȳ, S²)` are stored; raw data enter
/// through [`SemiConjugateModel::from_data`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiConjugateModel {
    n: usize,
    ybar: f64,
    s2: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    eta2: f64,
}

impl SemiConjugateModel {
    /// Build from sufficient statistics. Requires `n ≥ 2`, `S² > 0`, and
    /// positive `α`, `β`, `η²`.
    pub fn new(
        n: usize,
        ybar: f64,
        s2: f64,
        alpha: f64,
        beta: f64,
        gamma: f64,
        eta2: f64,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("need at least two observations, got {n}")));
        }
        if !(s2.is_finite() && s2 > 0.0) {
            return Err(Error::invalid(format!("centered sum of squares must be positive, got {s2}")));
        }
        Self::validated(n, ybar, s2, alpha, beta, gamma, eta2)
    }

    /// A model with no data: the posterior *is* the prior. Useful as a
    /// sampler oracle (every conditional reduces to the prior).
    pub fn prior_only(alpha: f64, beta: f64, gamma: f64, eta2: f64) -> Result<Self> {
        Self::validated(0, 0.0, 0.0, alpha, beta, gamma, eta2)
    }

    /// Build from raw observations, computing `ȳ` and the centered `S²`.
    pub fn from_data(y: &[f64], alpha: f64, beta: f64, gamma: f64, eta2: f64) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least two observations, got {}",
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observations must be finite".to_string()));
        }
        let n = y.len();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let s2 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum::<f64>();
        Self::new(n, ybar, s2, alpha, beta, gamma, eta2)
    }

    fn validated(
        n: usize,
        ybar: f64,
        s2: f64,
        alpha: f64,
        beta: f64,
        gamma: f64,
        eta2: f64,
    ) -> Result<Self> {
        if !ybar.is_finite() || !gamma.is_finite() {
            return Err(Error::invalid(format!(
                "data mean and prior location must be finite, got ({ybar}, {gamma})"
            )));
        }
        for (name, v) in [("alpha", alpha), ("beta", beta), ("eta2", eta2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(SemiConjugateModel { n, ybar, s2, alpha, beta, gamma, eta2 })
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Data mean `ȳ`.
    pub fn ybar(&self) -> f64 {
        self.ybar
    }

    /// Centered sum of squares `Σ(yᵢ − ȳ)²`.
    pub fn s2(&self) -> f64 {
        self.s2
    }

    /// Prior location of the mean.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Shape of the data-plus-prior inverse-gamma conditional on σ².
    fn scale_shape(&self) -> f64 {
        self.alpha + self.n as f64 / 2.0
    }

    /// `A(μ) = S²/2 + β + n(μ − ȳ)²/2`, the rate of that conditional.
    fn scale_rate(&self, mu: f64) -> f64 {
        let d = mu - self.ybar;
        self.s2 / 2.0 + self.beta + self.n as f64 * d * d / 2.0
    }

    /// Unnormalized joint log-posterior at `(μ, σ²)`; `−inf` outside the
    /// support `σ² > 0`.
    pub fn log_posterior(&self, mu: f64, sigma2: f64) -> f64 {
        if !mu.is_finite() || sigma2.is_nan() || sigma2 <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let c = self.n as f64 / 2.0 + self.alpha + 1.0;
        let dg = mu - self.gamma;
        -c * sigma2.ln() - self.scale_rate(mu) / sigma2 - dg * dg / (2.0 * self.eta2)
    }

    /// The joint posterior as a generic two-coordinate target `(μ, σ²)`,
    /// with the analytic Hessian of the log-posterior attached.
    pub fn model(&self) -> TargetModel {
        let m = self.clone();
        let h = self.clone();
        TargetModel::new("semiconjugate-normal", 2, move |t: &[f64]| {
            m.log_posterior(t[0], t[1])
        })
        .with_hessian(move |t: &[f64]| {
            let (mu, v) = (t[0], t[1]);
            debug_assert!(v > 0.0, "Hessian requested outside the support");
            let n = h.n as f64;
            let c = n / 2.0 + h.alpha + 1.0;
            let a = h.scale_rate(mu);
            let d = mu - h.ybar;
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    -n / v - 1.0 / h.eta2,
                    n * d / (v * v),
                    n * d / (v * v),
                    c / (v * v) - 2.0 * a / (v * v * v),
                ],
            )
        })
    }

    /// Fit the factorized approximation `q(μ) q(σ²)` by coordinate ascent.
    ///
    /// `q(μ)` is normal and `q(σ²)` inverse-gamma with fixed shape
    /// `α + n/2`; only the normal's two parameters and the inverse-gamma's
    /// scale move. Iteration stops when both variational means move less
    /// than [`CAVI_TOL`]. The scale factor needs `α + n/2 > 2` for a
    /// finite variance, which any realistic data size satisfies.
    pub fn cavi(&self) -> Result<CaviFit> {
        let n = self.n as f64;
        let a_n = self.scale_shape();
        let mut mu_q = if self.n > 0 { self.ybar } else { self.gamma };
        let mut s2_q = self.eta2;
        let mut mean_scale = self.beta / self.alpha;
        let mut b_n = self.beta;
        let mut iterations = 0;
        for sweep in 1..=CAVI_MAX_ITERS {
            iterations = sweep;
            b_n = self.beta
                + self.s2 / 2.0
                + n / 2.0 * ((mu_q - self.ybar).powi(2) + s2_q);
            let e_inv_scale = a_n / b_n;
            let tau = n * e_inv_scale + 1.0 / self.eta2;
            let new_mu = (n * e_inv_scale * self.ybar + self.gamma / self.eta2) / tau;
            let new_s2 = 1.0 / tau;
            let new_mean_scale = b_n / (a_n - 1.0);
            let moved = (new_mu - mu_q).abs().max((new_mean_scale - mean_scale).abs());
            mu_q = new_mu;
            s2_q = new_s2;
            mean_scale = new_mean_scale;
            if moved < CAVI_TOL {
                break;
            }
        }
        let vb = VbApproximation::new(vec![
            MarginalFamily::Normal { mean: mu_q, sd: s2_q.sqrt() },
            MarginalFamily::InverseGamma { shape: a_n, scale: b_n },
        ])?;
        Ok(CaviFit { vb, iterations })
    }

    /// Run the exact two-block Gibbs sampler: `μ | σ², y` is normal with
    /// precision `n/σ² + 1/η²` and `σ² | μ, y` is
    /// `IG(α + n/2, A(μ))`. The first half of the chain is discarded.
    pub fn gibbs(&self, n_iter: usize, policy: RngPolicy) -> Result<SemiGibbsRun> {
        let n_burn = self.validate_run(n_iter)?;
        let kept = n_iter - n_burn;
        let mut mu_draws = Vec::with_capacity(kept);
        let mut sigma2_draws = Vec::with_capacity(kept);
        self.run_sweeps(n_iter, n_burn, policy, |mu, sigma2| {
            mu_draws.push(mu);
            sigma2_draws.push(sigma2);
        });
        Ok(SemiGibbsRun { mu: mu_draws, sigma2: sigma2_draws })
    }

    /// [`gibbs`](Self::gibbs) without draw storage: moments are
    /// accumulated streaming, so reference runs of tens of millions of
    /// sweeps cost constant memory. The chain is identical to a plain
    /// run under the same policy.
    pub fn gibbs_moments(&self, n_iter: usize, policy: RngPolicy) -> Result<SemiGibbsMoments> {
        let n_burn = self.validate_run(n_iter)?;
        let mut acc = MomentAccumulator::new(2);
        self.run_sweeps(n_iter, n_burn, policy, |mu, sigma2| acc.push(&[mu, sigma2]));
        Ok(SemiGibbsMoments {
            kept: acc.count(),
            mean: acc.mean(),
            cov: acc.covariance(),
        })
    }

    fn validate_run(&self, n_iter: usize) -> Result<usize> {
        if n_iter < MIN_GIBBS_ITERS {
            return Err(Error::invalid(format!(
                "Gibbs run of {n_iter} is below the minimum {MIN_GIBBS_ITERS}"
            )));
        }
        Ok((n_iter as f64 * DEFAULT_BURN_IN).floor() as usize)
    }

    fn run_sweeps<F>(&self, n_iter: usize, n_burn: usize, policy: RngPolicy, mut visit: F)
    where
        F: FnMut(f64, f64),
    {
        let mut rng = policy.rng();
        let n = self.n as f64;
        let shape = self.scale_shape();
        // Only μ carries over between sweeps: σ² | μ ignores the previous σ².
        let mut mu = if self.n > 0 { self.ybar } else { self.gamma };

        for t in 0..n_iter {
            // σ² | μ: inverse-gamma via its reciprocal gamma.
            let g = Gamma::new(shape, 1.0 / self.scale_rate(mu))
                .expect("shape and rate are validated positive")
                .sample(&mut rng);
            let sigma2 = 1.0 / g;
            // μ | σ²: precision-weighted normal.
            let tau = n / sigma2 + 1.0 / self.eta2;
            let center = (n * self.ybar / sigma2 + self.gamma / self.eta2) / tau;
            mu = Normal::new(center, (1.0 / tau).sqrt())
                .expect("conditional sd is positive")
                .sample(&mut rng);
            if t >= n_burn {
                visit(mu, sigma2);
            }
        }
    }
}

/// Result of a coordinate-ascent fit.
#[derive(Clone, Debug)]
pub struct CaviFit {
    /// The fitted factorized approximation: `(μ, σ²)` with a normal and an
    /// inverse-gamma factor.
    pub vb: VbApproximation,
    /// Sweeps until the means stopped moving.
    pub iterations: usize,
}

/// Post burn-in draws of a semi-conjugate Gibbs run.
#[derive(Clone, Debug)]
pub struct SemiGibbsRun {
    /// Mean draws.
    pub mu: Vec<f64>,
    /// Variance draws.
    pub sigma2: Vec<f64>,
}

impl SemiGibbsRun {
    /// Retained sample count.
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    /// True when no draws were retained.
    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Sample means `(E[μ], E[σ²])`.
    pub fn mean(&self) -> (f64, f64) {
        let k = self.len() as f64;
        (
            self.mu.iter().sum::<f64>() / k,
            self.sigma2.iter().sum::<f64>() / k,
        )
    }

    /// Sample moments as a covariance estimate, with dispersion ratios
    /// taken against the given approximation variances.
    pub fn estimate(&self, vb_variance: &[f64]) -> Result<CovarianceEstimate> {
        let draws: Vec<Vec<f64>> = self
            .mu
            .iter()
            .zip(&self.sigma2)
            .map(|(m, s)| vec![*m, *s])
            .collect();
        CovarianceEstimate::from_draws(MethodTag::Gibbs, &draws, vb_variance)
    }
}

/// Streamed moments of a semi-conjugate Gibbs run.
#[derive(Clone, Debug)]
pub struct SemiGibbsMoments {
    /// Retained (post burn-in) sweep count.
    pub kept: usize,
    /// Posterior mean estimate of `(μ, σ²)`.
    pub mean: Vec<f64>,
    /// Posterior covariance estimate.
    pub cov: nalgebra::DMatrix<f64>,
}

impl SemiGibbsMoments {
    /// Package the moments as a covariance estimate, with dispersion
    /// ratios taken against the given approximation variances.
    pub fn estimate(&self, vb_variance: &[f64]) -> Result<CovarianceEstimate> {
        CovarianceEstimate::from_covariance_matrix(MethodTag::Gibbs, &self.cov, vb_variance)
    }
}
