//! Factorized variational approximation over a coordinate vector.
//!
//! A [`VbApproximation`] is an ordered list of [`MarginalFamily`] factors,
//! one per coordinate. Conditional factors
//! ([`MarginalFamily::NormalGivenScale`]) may reference a scale coordinate
//! of the same approximation; links are resolved at construction, when the
//! exact marginal mean and variance of every coordinate are computed and
//! cached. The joint log-density is the sum of factor log-densities, so it
//! is `-inf` (never an error) whenever any coordinate leaves its support.

use rand::Rng;
use serde::Serialize;

use crate::error::Error;
use crate::family::MarginalFamily;
use crate::Result;

/// A factorized (mean-field style) variational posterior approximation.
#[derive(Clone, Debug, Serialize)]
pub struct VbApproximation {
    marginals: Vec<MarginalFamily>,
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl VbApproximation {
    /// Build an approximation from per-coordinate factors, validating
    /// parameters, resolving conditional links, and caching exact moments.
    ///
    /// Link rules: a conditional factor must reference a *different*
    /// coordinate whose factor is itself unconditional and has a positive
    /// mean (it plays the role of a scale). One level of linking only.
    pub fn new(marginals: Vec<MarginalFamily>) -> Result<Self> {
        let dim = marginals.len();
        if dim == 0 {
            return Err(Error::invalid("approximation must have at least one coordinate"));
        }
        for (i, fam) in marginals.iter().enumerate() {
            fam.validate(dim)
                .map_err(|e| Error::invalid(format!("coordinate {i}: {e}")))?;
            if let Some(j) = fam.link() {
                if j == i {
                    return Err(Error::invalid(format!(
                        "coordinate {i} links to itself"
                    )));
                }
                if marginals[j].link().is_some() {
                    return Err(Error::invalid(format!(
                        "coordinate {i} links to coordinate {j}, which is itself conditional; \
                         links must resolve in one step"
                    )));
                }
                let linked_mean = marginals[j].mean();
                if !(linked_mean.is_finite() && linked_mean > 0.0) {
                    return Err(Error::invalid(format!(
                        "coordinate {i} links to coordinate {j} as a scale, but that \
                         coordinate's mean is {linked_mean} (must be positive)"
                    )));
                }
            }
        }

        let mean: Vec<f64> = marginals.iter().map(|f| f.mean()).collect();
        let variance: Vec<f64> = marginals
            .iter()
            .map(|f| match f.standalone_variance() {
                Some(v) => v,
                None => match f {
                    MarginalFamily::NormalGivenScale { scale_div, link, .. } => {
                        // Var(θ) = E[Var(θ | scale)] + Var(E[θ | scale]);
                        // the conditional mean is constant, so only the
                        // first term survives.
                        marginals[*link].mean() / scale_div
                    }
                    _ => unreachable!("only the conditional family lacks a standalone variance"),
                },
            })
            .collect();

        if let Some((i, v)) = variance.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::invalid(format!(
                "coordinate {i} has non-positive marginal variance {v}"
            )));
        }

        Ok(VbApproximation { marginals, mean, variance })
    }

    /// Independent normal approximation — the most common mean-field shape.
    pub fn independent_normal(means: &[f64], variances: &[f64]) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::invalid(format!(
                "means ({}) and variances ({}) differ in length",
                means.len(),
                variances.len()
            )));
        }
        let marginals = means
            .iter()
            .zip(variances)
            .map(|(&m, &v)| {
                if v <= 0.0 {
                    return Err(Error::invalid(format!("variance {v} must be positive")));
                }
                Ok(MarginalFamily::Normal { mean: m, sd: v.sqrt() })
            })
            .collect::<Result<Vec<_>>>()?;
        VbApproximation::new(marginals)
    }

    /// Number of coordinates.
    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    /// Per-coordinate factors.
    pub fn marginals(&self) -> &[MarginalFamily] {
        &self.marginals
    }

    /// Exact marginal means.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Exact marginal variances (conditional links already resolved).
    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    /// Joint log-density at `theta`: the sum of factor log-densities, with
    /// conditional factors evaluated at the current value of their linked
    /// coordinate. Returns `-inf` outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.dim(), "dimension mismatch");
        let mut total = 0.0;
        for (i, fam) in self.marginals.iter().enumerate() {
            let linked = fam.link().map(|j| theta[j]);
            total += fam.log_pdf(theta[i], linked);
            if total == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
        }
        total
    }

    /// Draw one joint sample. Unconditional coordinates are drawn first in
    /// index order, then conditional coordinates in index order, so the
    /// random stream consumption is deterministic.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = vec![f64::NAN; self.dim()];
        for (i, fam) in self.marginals.iter().enumerate() {
            if fam.link().is_none() {
                theta[i] = fam.sample(rng, None);
            }
        }
        for (i, fam) in self.marginals.iter().enumerate() {
            if let Some(j) = fam.link() {
                theta[i] = fam.sample(rng, Some(theta[j]));
            }
        }
        theta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngPolicy;
    use approx::assert_relative_eq;

    fn mixture_style_vb() -> VbApproximation {
        // A five-coordinate approximation exercising every link path:
        // (weight, location 1, location 2, scale 1, scale 2) with the
        // locations conditionally normal given their scales.
        VbApproximation::new(vec![
            MarginalFamily::Beta { alpha: 167.35, beta: 232.67 },
            MarginalFamily::NormalGivenScale { loc: 1.13, scale_div: 168.34, link: 3 },
            MarginalFamily::NormalGivenScale { loc: 3.57, scale_div: 233.66, link: 4 },
            MarginalFamily::InverseGamma { shape: 85.66, scale: 76.56 },
            MarginalFamily::InverseGamma { shape: 118.33, scale: 50.31 },
        ])
        .unwrap()
    }

    #[test]
    fn linked_variance_resolves_through_the_scale_mean() {
        let vb = mixture_style_vb();
        // E[scale 1] = 76.56 / 84.66; marginal var of location 1 divides by 168.34.
        let expected = 76.56 / 84.66 / 168.34;
        assert_relative_eq!(vb.variance()[1], expected, epsilon = 1e-12);
        assert_relative_eq!(vb.variance()[1], 5.3720e-3, max_relative = 1e-4);
        assert_relative_eq!(vb.variance()[3], 9.7753e-3, max_relative = 1e-4);
        assert_relative_eq!(vb.mean()[0], 0.41836, max_relative = 1e-4);
    }

    #[test]
    fn joint_log_density_is_the_sum_of_factors() {
        let vb = mixture_style_vb();
        let theta = [0.42, 1.10, 3.60, 0.90, 0.43];
        let manual: f64 = vb
            .marginals()
            .iter()
            .enumerate()
            .map(|(i, f)| f.log_pdf(theta[i], f.link().map(|j| theta[j])))
            .sum();
        assert_relative_eq!(vb.log_density(&theta), manual, epsilon = 1e-12);
    }

    #[test]
    fn out_of_support_joint_density_is_neg_inf() {
        let vb = mixture_style_vb();
        assert_eq!(vb.log_density(&[1.2, 1.1, 3.6, 0.9, 0.4]), f64::NEG_INFINITY);
        assert_eq!(vb.log_density(&[0.4, 1.1, 3.6, -0.9, 0.4]), f64::NEG_INFINITY);
    }

    #[test]
    fn sampling_matches_resolved_moments() {
        let vb = mixture_style_vb();
        let mut rng = RngPolicy::new(11).rng();
        let n = 400_000;
        let mut sums = vec![0.0; 5];
        let mut sqs = vec![0.0; 5];
        for _ in 0..n {
            let s = vb.sample(&mut rng);
            for i in 0..5 {
                sums[i] += s[i];
                sqs[i] += s[i] * s[i];
            }
        }
        for i in 0..5 {
            let mean = sums[i] / n as f64;
            let var = sqs[i] / n as f64 - mean * mean;
            assert_relative_eq!(mean, vb.mean()[i], max_relative = 5e-3, epsilon = 5e-3);
            assert_relative_eq!(var, vb.variance()[i], max_relative = 2e-2);
        }
    }

    #[test]
    fn independent_normal_constructor() {
        let vb = VbApproximation::independent_normal(&[1.0, -2.0], &[4.0, 0.25]).unwrap();
        assert_eq!(vb.mean(), &[1.0, -2.0]);
        assert_eq!(vb.variance(), &[4.0, 0.25]);
        let z = vb.log_density(&[1.0, -2.0]);
        // Density at the mean: product of normal peaks.
        let expected = crate::family::normal_log_pdf(1.0, 1.0, 4.0)
            + crate::family::normal_log_pdf(-2.0, -2.0, 0.25);
        assert_relative_eq!(z, expected, epsilon = 1e-12);
    }

    #[test]
    fn bad_links_are_rejected() {
        // Self-link.
        assert!(VbApproximation::new(vec![MarginalFamily::NormalGivenScale {
            loc: 0.0,
            scale_div: 1.0,
            link: 0
        }])
        .is_err());
        // Chain of conditionals.
        assert!(VbApproximation::new(vec![
            MarginalFamily::NormalGivenScale { loc: 0.0, scale_div: 1.0, link: 1 },
            MarginalFamily::NormalGivenScale { loc: 0.0, scale_div: 1.0, link: 2 },
            MarginalFamily::InverseGamma { shape: 3.0, scale: 1.0 },
        ])
        .is_err());
        // Linked coordinate with non-positive mean cannot act as a scale.
        assert!(VbApproximation::new(vec![
            MarginalFamily::NormalGivenScale { loc: 0.0, scale_div: 1.0, link: 1 },
            MarginalFamily::Normal { mean: -1.0, sd: 1.0 },
        ])
        .is_err());
    }
}
