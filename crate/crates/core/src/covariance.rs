//! Corrected covariance estimates and their invariants.
//!
//! Every correction method ends in a [`CovarianceEstimate`]: per-coordinate
//! variances, a correlation matrix, and the variance ratios against the VB
//! approximation that produced them. The constructor enforces the shared
//! invariants (symmetry, unit diagonal, bounded correlations, positive
//! variances) and computes the diagnostic flags; an indefinite implied
//! covariance is flagged, not rejected, because read noise can push a
//! nearly singular estimate slightly outside the cone.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Error;
use crate::Result;

/// Magnitude at which correlations are clamped (with a flag).
pub const CORRELATION_CAP: f64 = 0.999;

/// Which procedure produced an estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    /// Affine transformation fit by maximum likelihood.
    Affine,
    /// Projection reads plus the moment system.
    Marginal,
    /// Conditional reads plus partial-correlation inversion.
    Stepwise,
    /// Long-run Gibbs reference sampler.
    Gibbs,
    /// Closed-form moments (available for analytic targets).
    Exact,
}

/// A corrected covariance for a target, relative to a VB approximation.
#[derive(Clone, Debug, Serialize)]
pub struct CovarianceEstimate {
    /// Producing method.
    pub method: MethodTag,
    /// Corrected marginal variances.
    pub sigma2: Vec<f64>,
    /// Correlation matrix (symmetric, unit diagonal), stored dense.
    pub rho: Vec<Vec<f64>>,
    /// `sigma2[i] / vb_variance[i]` — the under/over-dispersion factors.
    pub ratios: Vec<f64>,
    /// True when any solved correlation exceeded [`CORRELATION_CAP`] in
    /// magnitude and was clamped.
    pub correlation_clamped: bool,
    /// True when the implied covariance has a meaningfully negative
    /// eigenvalue (it is then not a valid covariance, only a set of reads).
    pub indefinite: bool,
}

impl CovarianceEstimate {
    /// Assemble an estimate, validating shape and enforcing invariants.
    ///
    /// `rho` must be square and symmetric with a unit diagonal (tolerance
    /// 1e-9 on both); correlations beyond [`CORRELATION_CAP`] are clamped
    /// and flagged. Variances must be positive and finite.
    pub fn new(
        method: MethodTag,
        sigma2: Vec<f64>,
        rho: DMatrix<f64>,
        vb_variance: &[f64],
    ) -> Result<Self> {
        let p = sigma2.len();
        if vb_variance.len() != p {
            return Err(Error::invalid(format!(
                "estimate dimension {p} does not match approximation dimension {}",
                vb_variance.len()
            )));
        }
        if rho.nrows() != p || rho.ncols() != p {
            return Err(Error::invalid(format!(
                "correlation matrix is {}x{}, expected {p}x{p}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        for (i, &v) in sigma2.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::NegativeVariance { index: i, value: v });
            }
        }

        let mut clamped = false;
        let mut matrix = rho;
        for i in 0..p {
            if (matrix[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "correlation diagonal entry {i} is {} (must be 1)",
                    matrix[(i, i)]
                )));
            }
            matrix[(i, i)] = 1.0;
            for j in (i + 1)..p {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-9 {
                    return Err(Error::invalid(format!(
                        "correlation matrix is asymmetric at ({i}, {j})"
                    )));
                }
                let mut r = 0.5 * (matrix[(i, j)] + matrix[(j, i)]);
                if !r.is_finite() {
                    return Err(Error::invalid(format!(
                        "correlation ({i}, {j}) is {r}"
                    )));
                }
                if r.abs() > CORRELATION_CAP {
                    r = CORRELATION_CAP * r.signum();
                    clamped = true;
                }
                matrix[(i, j)] = r;
                matrix[(j, i)] = r;
            }
        }

        let ratios = sigma2
            .iter()
            .zip(vb_variance)
            .map(|(s, v)| s / v)
            .collect();

        let mut estimate = CovarianceEstimate {
            method,
            sigma2,
            rho: (0..p).map(|i| (0..p).map(|j| matrix[(i, j)]).collect()).collect(),
            ratios,
            correlation_clamped: clamped,
            indefinite: false,
        };
        let implied = estimate.implied_covariance();
        let eigen = implied.symmetric_eigenvalues();
        let max_eig = eigen.iter().fold(0.0_f64, |m, &e| m.max(e.abs()));
        estimate.indefinite = eigen.iter().any(|&e| e < -1e-8 * max_eig.max(1.0));
        Ok(estimate)
    }

    /// Build from a raw covariance matrix (e.g. streamed sampler
    /// moments): splits it into variances and correlations.
    pub fn from_covariance_matrix(
        method: MethodTag,
        cov: &DMatrix<f64>,
        vb_variance: &[f64],
    ) -> Result<Self> {
        let p = cov.nrows();
        if cov.ncols() != p {
            return Err(Error::invalid(format!(
                "covariance matrix is {p}×{}, expected square",
                cov.ncols()
            )));
        }
        let sigma2: Vec<f64> = (0..p).map(|i| cov[(i, i)]).collect();
        let mut rho = DMatrix::identity(p, p);
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    rho[(i, j)] = cov[(i, j)] / (sigma2[i] * sigma2[j]).sqrt();
                }
            }
        }
        CovarianceEstimate::new(method, sigma2, rho, vb_variance)
    }

    /// Estimate covariance and correlations from sampler draws
    /// (rows = draws, in coordinate order), e.g. a Gibbs reference run.
    pub fn from_draws(method: MethodTag, draws: &[Vec<f64>], vb_variance: &[f64]) -> Result<Self> {
        let n = draws.len();
        let p = vb_variance.len();
        if n < 10 {
            return Err(Error::invalid(format!(
                "need at least 10 draws to estimate a covariance, got {n}"
            )));
        }
        let mut mean = DVector::zeros(p);
        for d in draws {
            if d.len() != p {
                return Err(Error::invalid("draw dimension mismatch".to_string()));
            }
            mean += DVector::from_column_slice(d);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(p, p);
        for d in draws {
            let c = DVector::from_column_slice(d) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Self::from_covariance_matrix(method, &cov, vb_variance)
    }

    /// Coordinate dimension.
    pub fn dim(&self) -> usize {
        self.sigma2.len()
    }

    /// Correlation matrix as a dense nalgebra matrix.
    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::from_fn(p, p, |i, j| self.rho[i][j])
    }

    /// Implied covariance `Σ_ij = σ_i ρ_ij σ_j`.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let p = self.dim();
        let sd: Vec<f64> = self.sigma2.iter().map(|v| v.sqrt()).collect();
        DMatrix::from_fn(p, p, |i, j| sd[i] * self.rho[i][j] * sd[j])
    }

    /// Off-diagonal correlations in lexicographic pair order
    /// `(0,1), (0,2), …, (p-2, p-1)`.
    pub fn upper_correlations(&self) -> Vec<f64> {
        let p = self.dim();
        let mut out = Vec::with_capacity(p * (p - 1) / 2);
        for i in 0..p {
            for j in (i + 1)..p {
                out.push(self.rho[i][j]);
            }
        }
        out
    }
}

/// Streaming mean/covariance accumulator.
///
/// Long sampler runs feed their draws through this instead of storing
/// them; memory stays constant at O(p²). Sums are anchored at the first
/// sample so that large raw cross-products do not erode precision.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    dim: usize,
    count: usize,
    anchor: Vec<f64>,
    sum: Vec<f64>,
    cross: DMatrix<f64>,
}

impl MomentAccumulator {
    /// Empty accumulator over `dim` coordinates.
    pub fn new(dim: usize) -> Self {
        MomentAccumulator {
            dim,
            count: 0,
            anchor: vec![0.0; dim],
            sum: vec![0.0; dim],
            cross: DMatrix::zeros(dim, dim),
        }
    }

    /// Add one sample.
    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        if self.count == 0 {
            self.anchor.copy_from_slice(x);
        }
        self.count += 1;
        for i in 0..self.dim {
            let di = x[i] - self.anchor[i];
            self.sum[i] += di;
            for j in i..self.dim {
                self.cross[(i, j)] += di * (x[j] - self.anchor[j]);
            }
        }
    }

    /// Samples absorbed so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Sample mean (needs at least one sample).
    pub fn mean(&self) -> Vec<f64> {
        assert!(self.count > 0, "no samples accumulated");
        let k = self.count as f64;
        (0..self.dim).map(|i| self.anchor[i] + self.sum[i] / k).collect()
    }

    /// Sample covariance with the `n − 1` denominator (needs at least
    /// two samples).
    pub fn covariance(&self) -> DMatrix<f64> {
        assert!(self.count > 1, "covariance needs at least two samples");
        let k = self.count as f64;
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let c = (self.cross[(i, j)] - self.sum[i] * self.sum[j] / k) / (k - 1.0);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        cov
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn corr2(r: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[1.0, r, r, 1.0])
    }

    #[test]
    fn ratios_and_implied_covariance() {
        let est = CovarianceEstimate::new(
            MethodTag::Exact,
            vec![4.0, 9.0],
            corr2(0.5),
            &[1.0, 3.0],
        )
        .unwrap();
        assert_eq!(est.ratios, vec![4.0, 3.0]);
        let cov = est.implied_covariance();
        assert_relative_eq!(cov[(0, 1)], 0.5 * 2.0 * 3.0, epsilon = 1e-12);
        assert!(!est.indefinite);
        assert!(!est.correlation_clamped);
    }

    #[test]
    fn overshooting_correlation_is_clamped_and_flagged() {
        let est = CovarianceEstimate::new(
            MethodTag::Marginal,
            vec![1.0, 1.0],
            corr2(1.04),
            &[1.0, 1.0],
        )
        .unwrap();
        assert!(est.correlation_clamped);
        assert_relative_eq!(est.rho[0][1], CORRELATION_CAP, epsilon = 1e-12);
    }

    #[test]
    fn indefinite_reads_are_flagged_not_rejected() {
        // Pairwise correlations that cannot coexist in one covariance.
        let rho = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0],
        );
        let est = CovarianceEstimate::new(
            MethodTag::Stepwise,
            vec![1.0, 1.0, 1.0],
            rho,
            &[1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!(est.indefinite);
    }

    #[test]
    fn asymmetry_and_bad_diagonals_are_rejected() {
        let bad_diag = DMatrix::from_row_slice(2, 2, &[1.01, 0.0, 0.0, 1.0]);
        assert!(
            CovarianceEstimate::new(MethodTag::Exact, vec![1.0, 1.0], bad_diag, &[1.0, 1.0])
                .is_err()
        );
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.1, 1.0]);
        assert!(
            CovarianceEstimate::new(MethodTag::Exact, vec![1.0, 1.0], asym, &[1.0, 1.0]).is_err()
        );
    }

    #[test]
    fn non_positive_variance_is_rejected() {
        let err = CovarianceEstimate::new(
            MethodTag::Marginal,
            vec![1.0, -0.2],
            corr2(0.0),
            &[1.0, 1.0],
        );
        assert!(matches!(err, Err(Error::NegativeVariance { index: 1, .. })));
    }

    #[test]
    fn from_draws_recovers_a_known_covariance() {
        use rand::Rng;
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::rng::RngPolicy::new(3).rng();
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        // X = Z1, Y = 0.6 Z1 + 0.8 Z2 → var 1 each, corr 0.6.
        let draws: Vec<Vec<f64>> = (0..200_000)
            .map(|_| {
                let z1: f64 = std_normal.sample(&mut rng);
                let z2: f64 = rng.sample(std_normal);
                vec![z1, 0.6 * z1 + 0.8 * z2]
            })
            .collect();
        let est = CovarianceEstimate::from_draws(MethodTag::Gibbs, &draws, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(est.sigma2[0], 1.0, max_relative = 0.02);
        assert_relative_eq!(est.rho[0][1], 0.6, epsilon = 0.01);
        assert_relative_eq!(est.ratios[1], 2.0, max_relative = 0.03);
    }

    #[test]
    fn streaming_moments_match_two_pass_computation() {
        // Values with a large common offset, the case the anchoring is for.
        let draws: Vec<Vec<f64>> = (0..500)
            .map(|k| {
                let t = k as f64 / 500.0;
                vec![1.0e6 + t, 2.0e6 + t * t, -3.0e6 + (t * 7.0).sin()]
            })
            .collect();
        let mut acc = MomentAccumulator::new(3);
        for d in &draws {
            acc.push(d);
        }
        assert_eq!(acc.count(), 500);

        let n = draws.len() as f64;
        let mean: Vec<f64> =
            (0..3).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n).collect();
        for i in 0..3 {
            assert_relative_eq!(acc.mean()[i], mean[i], max_relative = 1e-12);
        }
        let cov = acc.covariance();
        for i in 0..3 {
            for j in 0..3 {
                let direct: f64 = draws
                    .iter()
                    .map(|d| (d[i] - mean[i]) * (d[j] - mean[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                assert_relative_eq!(cov[(i, j)], direct, epsilon = 1e-9, max_relative = 1e-6);
            }
        }
    }
}
