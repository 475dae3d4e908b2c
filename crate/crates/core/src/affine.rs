//! Affine correction: fit `θ = Aη + b` over VB samples by maximum
//! likelihood under the target.
//!
//! With `η` drawn from the VB approximation `q`, the transformed variable
//! `Aη + b` has density `q(A⁻¹(θ - b)) / |det A|`; choosing `(A, b)` to
//! maximize `Σᵢ log p(Aηᵢ + b) + n·log det A` makes the transformed
//! approximation as close as possible (in the sample KL sense) to the
//! target `p`. The corrected covariance follows as `A · diag(var_q) · Aᵀ`,
//! which is valid because every supported factorization has uncorrelated
//! coordinates (conditional factors have constant conditional means).
//!
//! `A` is constrained to a positive-diagonal lower-triangular pattern
//! (optionally banded or diagonal); the diagonal is optimized on the log
//! scale so positivity is structural rather than enforced by penalties.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceEstimate, MethodTag};
use crate::error::Error;
use crate::model::TargetModel;
use crate::optimize::{minimize, Options, Termination};
use crate::rng::RngPolicy;
use crate::vb::VbApproximation;
use crate::Result;

/// Sparsity pattern of the fitted matrix `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffineStructure {
    /// `A` diagonal: per-coordinate rescaling only.
    Diagonal,
    /// `A` fully lower triangular: general covariance correction.
    LowerTriangular,
    /// Lower triangular restricted to `i - j <= bandwidth`.
    Banded {
        /// Number of sub-diagonals kept (0 = diagonal).
        bandwidth: usize,
    },
}

impl AffineStructure {
    /// Strict-lower entries kept for dimension `p`, in row-major order.
    fn strict_lower_pattern(&self, p: usize) -> Vec<(usize, usize)> {
        let keep = |i: usize, j: usize| match self {
            AffineStructure::Diagonal => false,
            AffineStructure::LowerTriangular => true,
            AffineStructure::Banded { bandwidth } => i - j <= *bandwidth,
        };
        let mut pattern = Vec::new();
        for i in 0..p {
            for j in 0..i {
                if keep(i, j) {
                    pattern.push((i, j));
                }
            }
        }
        pattern
    }
}

/// Number of optimizer restarts (first is the identity start).
pub const RESTARTS: usize = 5;
/// Fraction of transformed samples allowed outside the target support.
pub const MAX_OUTSIDE_FRACTION: f64 = 0.01;
/// Default VB sample count for the fit.
pub const DEFAULT_SAMPLES: usize = 600;
/// Floor applied to out-of-support log-densities inside the objective so
/// finite-difference probes stay finite near a support boundary.
const LOG_DENSITY_FLOOR: f64 = -1e10;

/// A fitted affine correction.
#[derive(Clone, Debug)]
pub struct AffineFit {
    /// Fitted transformation matrix (positive diagonal, lower triangular).
    pub a: DMatrix<f64>,
    /// Fitted shift.
    pub b: DVector<f64>,
    /// Structure that was fitted.
    pub structure: AffineStructure,
    /// Mean (per sample) of `log p(Aη + b)` plus `log det A` at the optimum.
    pub objective: f64,
    /// Iterations used by the winning restart.
    pub iterations: usize,
    /// Index of the winning restart (0 = identity start).
    pub best_restart: usize,
    /// Whether the winning restart reached gradient tolerance.
    pub converged: bool,
    /// Fraction of samples with `log p = -inf` at the optimum.
    pub outside_fraction: f64,
    /// Number of VB samples used.
    pub n_samples: usize,
}

struct Parameterization {
    p: usize,
    pattern: Vec<(usize, usize)>,
}

impl Parameterization {
    fn len(&self) -> usize {
        2 * self.p + self.pattern.len()
    }

    /// params = [log diag | strict lower (row-major within pattern) | shift]
    fn unpack(&self, params: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.p;
        let mut a = DMatrix::zeros(p, p);
        for i in 0..p {
            a[(i, i)] = params[i].exp();
        }
        for (k, &(i, j)) in self.pattern.iter().enumerate() {
            a[(i, j)] = params[p + k];
        }
        let b = DVector::from_column_slice(&params[p + self.pattern.len()..]);
        (a, b)
    }

    fn identity_params(&self) -> Vec<f64> {
        vec![0.0; self.len()]
    }
}

fn count_outside(model: &TargetModel, a: &DMatrix<f64>, b: &DVector<f64>, samples: &[DVector<f64>]) -> usize {
    samples
        .iter()
        .filter(|eta| {
            let theta = a * *eta + b;
            model.log_density(theta.as_slice()) == f64::NEG_INFINITY
        })
        .count()
}

/// Fit the affine correction by maximum likelihood over `n_samples` VB
/// draws, with multiple jittered restarts (common random numbers: the same
/// draws are reused by every restart).
///
/// Errors: [`Error::SampleOutsideSupport`] when more than
/// [`MAX_OUTSIDE_FRACTION`] of transformed samples fall outside the target
/// support at the identity start or at the optimum;
/// [`Error::OptimizerDiverged`] when no restart produces a finite optimum.
pub fn fit_affine(
    model: &TargetModel,
    vb: &VbApproximation,
    structure: AffineStructure,
    n_samples: usize,
    policy: RngPolicy,
) -> Result<AffineFit> {
    let p = model.dim();
    if vb.dim() != p {
        return Err(Error::invalid(format!(
            "approximation dimension {} does not match model dimension {p}",
            vb.dim()
        )));
    }
    if n_samples < 100 {
        return Err(Error::invalid(format!(
            "affine fit needs at least 100 samples, got {n_samples}"
        )));
    }
    if let AffineStructure::Banded { bandwidth } = structure {
        if bandwidth >= p {
            return Err(Error::invalid(format!(
                "bandwidth {bandwidth} must be below dimension {p}"
            )));
        }
    }

    let mut sampler = policy.sub(0).rng();
    let samples: Vec<DVector<f64>> = (0..n_samples)
        .map(|_| DVector::from_vec(vb.sample(&mut sampler)))
        .collect();

    let par = Parameterization { p, pattern: structure.strict_lower_pattern(p) };

    // Reject immediately if the untransformed approximation barely overlaps
    // the target's support: the fit would start blind.
    let identity = DMatrix::identity(p, p);
    let zero = DVector::zeros(p);
    let outside_start = count_outside(model, &identity, &zero, &samples);
    if outside_start as f64 > MAX_OUTSIDE_FRACTION * n_samples as f64 {
        return Err(Error::SampleOutsideSupport {
            count: outside_start,
            total: n_samples,
            stage: "identity start",
        });
    }

    // Minimize the negative mean log-likelihood; the floor keeps stray
    // out-of-support samples finite so gradients remain usable.
    let objective = |params: &[f64]| -> f64 {
        let (a, b) = par.unpack(params);
        let mut total = 0.0;
        for eta in &samples {
            let theta = &a * eta + &b;
            let lp = model.log_density(theta.as_slice());
            total += lp.max(LOG_DENSITY_FLOOR);
        }
        let log_det: f64 = (0..p).map(|i| a[(i, i)].ln()).sum();
        -(total / n_samples as f64 + log_det)
    };

    // Jitter scales: relative on the diagonal, scale-aware elsewhere.
    let sd_q: Vec<f64> = vb.variance().iter().map(|v| v.sqrt()).collect();
    let mut jitter_rng = policy.sub(1).rng();
    let opts = Options { grad_tol: 1e-6, max_iters: 500, ..Options::default() };

    let mut best: Option<(usize, crate::optimize::Outcome)> = None;
    for restart in 0..RESTARTS {
        let mut start = par.identity_params();
        if restart > 0 {
            for coord in start.iter_mut().take(p) {
                *coord += 0.05 * jitter_rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            for (k, &(i, j)) in par.pattern.iter().enumerate() {
                let scale = 0.05 * sd_q[i] / sd_q[j];
                start[p + k] += scale * jitter_rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            for (i, sd) in sd_q.iter().enumerate() {
                start[p + par.pattern.len() + i] +=
                    0.05 * sd * jitter_rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let outcome = minimize(objective, &start, &opts);
        if outcome.termination == Termination::NonFiniteStart || !outcome.value.is_finite() {
            continue;
        }
        let better = match &best {
            None => true,
            Some((_, incumbent)) => outcome.value < incumbent.value,
        };
        if better {
            best = Some((restart, outcome));
        }
    }

    let (best_restart, outcome) = best.ok_or_else(|| {
        Error::OptimizerDiverged("no affine restart produced a finite objective".to_string())
    })?;

    let (a, b) = par.unpack(&outcome.x);
    if !a.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::OptimizerDiverged(
            "affine parameters are non-finite at the optimum".to_string(),
        ));
    }

    let outside_end = count_outside(model, &a, &b, &samples);
    if outside_end as f64 > MAX_OUTSIDE_FRACTION * n_samples as f64 {
        return Err(Error::SampleOutsideSupport {
            count: outside_end,
            total: n_samples,
            stage: "optimum",
        });
    }

    Ok(AffineFit {
        a,
        b,
        structure,
        objective: -outcome.value,
        iterations: outcome.iterations,
        best_restart,
        converged: outcome.converged(),
        outside_fraction: outside_end as f64 / n_samples as f64,
        n_samples,
    })
}

/// Corrected covariance implied by a fit: `Σ̂ = A · diag(var_q) · Aᵀ`.
pub fn corrected_covariance(fit: &AffineFit, vb: &VbApproximation) -> Result<CovarianceEstimate> {
    let p = vb.dim();
    let v = DMatrix::from_diagonal(&DVector::from_column_slice(vb.variance()));
    let sigma = &fit.a * v * fit.a.transpose();
    let sigma2: Vec<f64> = (0..p).map(|i| sigma[(i, i)]).collect();
    let sd: Vec<f64> = sigma2.iter().map(|x| x.sqrt()).collect();
    let rho = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            1.0
        } else {
            sigma[(i, j)] / (sd[i] * sd[j])
        }
    });
    CovarianceEstimate::new(MethodTag::Affine, sigma2, rho, vb.variance())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::mvn::MvnSpec;
    use approx::assert_relative_eq;

    #[test]
    fn one_dimensional_rescale_and_shift() {
        // Target N(3, 4), approximation N(0, 1): population optimum is
        // a = 2, b = 3.
        let spec = MvnSpec::new(vec![3.0], vec![vec![4.0]]).unwrap();
        let model = spec.model().unwrap();
        let vb = VbApproximation::independent_normal(&[0.0], &[1.0]).unwrap();
        let fit = fit_affine(&model, &vb, AffineStructure::LowerTriangular, 5000, RngPolicy::new(1))
            .unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.a[(0, 0)], 2.0, max_relative = 0.06);
        assert_relative_eq!(fit.b[0], 3.0, epsilon = 0.12);
        let est = corrected_covariance(&fit, &vb).unwrap();
        assert_relative_eq!(est.sigma2[0], 4.0, max_relative = 0.12);
        assert_relative_eq!(est.ratios[0], 4.0, max_relative = 0.12);
    }

    #[test]
    fn lower_triangular_recovers_a_correlated_gaussian() {
        let spec = MvnSpec::from_correlations(
            vec![1.0, -1.0],
            &[2.0, 5.0],
            &[0.6],
        )
        .unwrap();
        let model = spec.model().unwrap();
        let vb =
            VbApproximation::independent_normal(&[1.0, -1.0], &[1.0, 2.0]).unwrap();
        let fit = fit_affine(&model, &vb, AffineStructure::LowerTriangular, 8000, RngPolicy::new(2))
            .unwrap();
        let est = corrected_covariance(&fit, &vb).unwrap();
        assert_relative_eq!(est.sigma2[0], 2.0, max_relative = 0.08);
        assert_relative_eq!(est.sigma2[1], 5.0, max_relative = 0.08);
        assert_relative_eq!(est.rho[0][1], 0.6, epsilon = 0.05);
        // Population optimum: A = chol(Σ) · diag(sd_q)⁻¹.
        let l = nalgebra::Cholesky::new(spec.covariance_matrix()).unwrap().l().clone_owned();
        let expected_a00 = l[(0, 0)] / 1.0_f64.sqrt();
        assert_relative_eq!(fit.a[(0, 0)], expected_a00, max_relative = 0.08);
    }

    #[test]
    fn diagonal_structure_finds_conditional_variances() {
        // With a diagonal A on a correlated Gaussian, the population
        // optimum rescales each coordinate to the conditional variance
        // 1/(Σ⁻¹)_ii, not the marginal variance.
        let spec = MvnSpec::from_correlations(vec![0.0, 0.0], &[1.0, 1.0], &[0.8]).unwrap();
        let model = spec.model().unwrap();
        let vb = VbApproximation::independent_normal(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let fit =
            fit_affine(&model, &vb, AffineStructure::Diagonal, 8000, RngPolicy::new(3)).unwrap();
        let est = corrected_covariance(&fit, &vb).unwrap();
        let conditional = 1.0 - 0.8 * 0.8;
        assert_relative_eq!(est.sigma2[0], conditional, max_relative = 0.10);
        assert_relative_eq!(est.sigma2[1], conditional, max_relative = 0.10);
        assert_eq!(est.rho[0][1], 0.0);
    }

    #[test]
    fn banded_extremes_match_diagonal_and_full() {
        let spec = MvnSpec::from_correlations(vec![0.0, 0.0], &[1.0, 4.0], &[0.5]).unwrap();
        let model = spec.model().unwrap();
        let vb = VbApproximation::independent_normal(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let full = fit_affine(&model, &vb, AffineStructure::LowerTriangular, 2000, RngPolicy::new(4))
            .unwrap();
        let band1 = fit_affine(
            &model,
            &vb,
            AffineStructure::Banded { bandwidth: 1 },
            2000,
            RngPolicy::new(4),
        )
        .unwrap();
        assert_relative_eq!(full.a[(1, 0)], band1.a[(1, 0)], epsilon = 1e-9);
        let diag = fit_affine(&model, &vb, AffineStructure::Diagonal, 2000, RngPolicy::new(4))
            .unwrap();
        let band0 = fit_affine(
            &model,
            &vb,
            AffineStructure::Banded { bandwidth: 0 },
            2000,
            RngPolicy::new(4),
        )
        .unwrap();
        assert_relative_eq!(diag.a[(0, 0)], band0.a[(0, 0)], epsilon = 1e-9);
        assert_eq!(band0.a[(1, 0)], 0.0);
    }

    #[test]
    fn support_mismatch_is_detected_at_start() {
        // Target lives on x > 0; the approximation is far in the negatives.
        let model = TargetModel::new("positive", 1, |t: &[f64]| {
            if t[0] > 0.0 {
                -t[0]
            } else {
                f64::NEG_INFINITY
            }
        });
        let vb = VbApproximation::independent_normal(&[-5.0], &[0.01]).unwrap();
        let err = fit_affine(&model, &vb, AffineStructure::Diagonal, 500, RngPolicy::new(5));
        assert!(matches!(err, Err(Error::SampleOutsideSupport { stage: "identity start", .. })));
    }

    #[test]
    fn fit_is_deterministic() {
        let spec = MvnSpec::demo3();
        let model = spec.model().unwrap();
        let vb = MvnSpec::demo3_vb();
        let f1 = fit_affine(&model, &vb, AffineStructure::LowerTriangular, 600, RngPolicy::new(6))
            .unwrap();
        let f2 = fit_affine(&model, &vb, AffineStructure::LowerTriangular, 600, RngPolicy::new(6))
            .unwrap();
        assert_eq!(f1.a, f2.a);
        assert_eq!(f1.b, f2.b);
        assert_eq!(f1.objective, f2.objective);
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let spec = MvnSpec::demo3();
        let model = spec.model().unwrap();
        let vb = MvnSpec::demo3_vb();
        assert!(fit_affine(&model, &vb, AffineStructure::LowerTriangular, 50, RngPolicy::new(0))
            .is_err());
        assert!(fit_affine(
            &model,
            &vb,
            AffineStructure::Banded { bandwidth: 3 },
            600,
            RngPolicy::new(0)
        )
        .is_err());
        let wrong_dim = VbApproximation::independent_normal(&[0.0], &[1.0]).unwrap();
        assert!(fit_affine(
            &model,
            &wrong_dim,
            AffineStructure::Diagonal,
            600,
            RngPolicy::new(0)
        )
        .is_err());
    }
}
