//! Two-component normal mixture model with conjugate priors.
//!
//! Coordinates are ordered `θ = (π, μ₁, μ₂, σ₁², σ₂²)`. The likelihood of
//! one observation is `π φ(x|μ₁,σ₁²) + (1−π) φ(x|μ₂,σ₂²)`; the priors are
//! `π ~ Beta(a₀/2, a₀/2)` and, per component,
//! `μⱼ | σⱼ² ~ N(cⱼ, σⱼ²/dⱼ²)` with `σⱼ² ~ IG(eⱼ, fⱼ)`.
//!
//! The log-posterior is computed with a per-observation log-sum-exp and an
//! analytic Hessian (the per-observation Hessian is
//! `w₁T₁ + w₂T₂ + w₁w₂ δδᵀ` with `w` the responsibilities, `T` the
//! component log-density curvatures and `δ` the difference of component
//! score vectors), which keeps curvature-hungry consumers fast.
//!
//! Two structural facts matter to callers. The posterior is invariant
//! under swapping the component labels together with `π ↦ 1−π`; the Gibbs
//! sampler resolves that symmetry by relabeling every draw so `μ₁ < μ₂`.
//! And with a small weight concentration `a₀` the prior on π is unbounded
//! at the ends of `(0,1)` (an integrable singularity); maximizers started
//! in the posterior bulk are unaffected, but global statements about the
//! log-posterior's supremum are not meaningful.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceEstimate, MethodTag, MomentAccumulator};
use crate::error::Error;
use crate::family::normal_log_pdf;
use crate::imh::DEFAULT_BURN_IN;
use crate::model::TargetModel;
use crate::rng::RngPolicy;
use crate::Result;

/// Coordinate count: `(π, μ₁, μ₂, σ₁², σ₂²)`.
pub const MIXTURE_DIM: usize = 5;
/// Smallest Gibbs run accepted when the moments will be used as a
/// covariance reference.
pub const MIN_MIXTURE_GIBBS_ITERS: usize = 100_000;

/// Conjugate prior for one mixture component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentPrior {
    /// Prior location `c` of the component mean.
    pub location: f64,
    /// Prior precision multiplier `d²`: the mean's prior variance is
    /// `σ²/d²`.
    pub precision_mult: f64,
    /// Inverse-gamma shape `e` of the component variance.
    pub shape: f64,
    /// Inverse-gamma scale `f` of the component variance.
    pub scale: f64,
}

impl ComponentPrior {
    fn validate(&self, label: usize) -> Result<()> {
        if !self.location.is_finite() {
            return Err(Error::invalid(format!(
                "component {label}: prior location must be finite, got {}",
                self.location
            )));
        }
        for (name, v) in [
            ("precision_mult", self.precision_mult),
            ("shape", self.shape),
            ("scale", self.scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "component {label}: {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Full prior specification of the mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixturePriors {
    /// Beta concentration `a₀`: the weight prior is `Beta(a₀/2, a₀/2)`.
    pub weight_concentration: f64,
    /// Per-component conjugate priors.
    pub components: [ComponentPrior; 2],
}

impl Default for MixturePriors {
    /// Weakly informative desk defaults: a near-uniform-mass weight prior
    /// and identical diffuse component priors centered on 2.5.
    fn default() -> Self {
        let component = ComponentPrior {
            location: 2.5,
            precision_mult: 1.0,
            shape: 2.0,
            scale: 1.0,
        };
        MixturePriors {
            weight_concentration: 0.02,
            components: [component, component],
        }
    }
}

impl MixturePriors {
    fn validate(&self) -> Result<()> {
        if !(self.weight_concentration.is_finite() && self.weight_concentration > 0.0) {
            return Err(Error::invalid(format!(
                "weight concentration must be positive, got {}",
                self.weight_concentration
            )));
        }
        self.components[0].validate(1)?;
        self.components[1].validate(2)
    }

    /// True when the prior is exactly symmetric under a label swap.
    pub fn is_symmetric(&self) -> bool {
        self.components[0] == self.components[1]
    }
}

/// Two-component normal mixture: data plus priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    data: Vec<f64>,
    priors: MixturePriors,
}

impl MixtureModel {
    /// Build from observations (at least two) and priors.
    pub fn new(data: Vec<f64>, priors: MixturePriors) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least two observations, got {}",
                data.len()
            )));
        }
        Self::assemble(data, priors)
    }

    /// Build with the default priors.
    pub fn with_default_priors(data: Vec<f64>) -> Result<Self> {
        Self::new(data, MixturePriors::default())
    }

    /// The no-data model: the posterior is exactly the prior.
    pub fn prior_only(priors: MixturePriors) -> Result<Self> {
        Self::assemble(Vec::new(), priors)
    }

    fn assemble(data: Vec<f64>, priors: MixturePriors) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("observations must be finite".to_string()));
        }
        priors.validate()?;
        Ok(MixtureModel { data, priors })
    }

    /// Observations.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Prior specification.
    pub fn priors(&self) -> &MixturePriors {
        &self.priors
    }

    fn in_support(theta: &[f64]) -> bool {
        theta.iter().all(|v| v.is_finite())
            && theta[0] > 0.0
            && theta[0] < 1.0
            && theta[3] > 0.0
            && theta[4] > 0.0
    }

    /// Log prior of one component's `(μ, σ²)` block, up to a constant:
    /// `−(e + 3/2)·log σ² − d²(μ−c)²/(2σ²) − f/σ²`.
    fn component_log_prior(prior: &ComponentPrior, mu: f64, v: f64) -> f64 {
        let d = mu - prior.location;
        -(prior.shape + 1.5) * v.ln()
            - prior.precision_mult * d * d / (2.0 * v)
            - prior.scale / v
    }

    /// Unnormalized log-posterior at `θ = (π, μ₁, μ₂, σ₁², σ₂²)`; `−inf`
    /// outside the support.
    ///
    /// The terms are grouped so that a label swap (with symmetric priors)
    /// produces bit-identical floating point: the likelihood's
    /// log-sum-exp and the component prior pair are both commutative as
    /// computed.
    pub fn log_posterior(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), MIXTURE_DIM);
        if !Self::in_support(theta) {
            return f64::NEG_INFINITY;
        }
        let (pi, mu1, mu2, v1, v2) = (theta[0], theta[1], theta[2], theta[3], theta[4]);
        let (lp, lq) = (pi.ln(), (1.0 - pi).ln());

        let mut likelihood = 0.0;
        for &x in &self.data {
            let t1 = lp + normal_log_pdf(x, mu1, v1);
            let t2 = lq + normal_log_pdf(x, mu2, v2);
            let m = t1.max(t2);
            likelihood += m + ((t1 - m).exp() + (t2 - m).exp()).ln();
        }

        let a0 = self.priors.weight_concentration;
        let weight_prior = (a0 / 2.0 - 1.0) * (lp + lq);
        let comp_priors = Self::component_log_prior(&self.priors.components[0], mu1, v1)
            + Self::component_log_prior(&self.priors.components[1], mu2, v2);
        likelihood + (weight_prior + comp_priors)
    }

    /// Analytic Hessian of the log-posterior at an interior point.
    fn hessian_at(&self, theta: &[f64]) -> DMatrix<f64> {
        debug_assert!(Self::in_support(theta), "Hessian requested outside the support");
        let (pi, mu1, mu2, v1, v2) = (theta[0], theta[1], theta[2], theta[3], theta[4]);
        let (lp, lq) = (pi.ln(), (1.0 - pi).ln());
        let mut h = DMatrix::zeros(MIXTURE_DIM, MIXTURE_DIM);

        for &x in &self.data {
            let (r1, r2) = (x - mu1, x - mu2);
            let t1 = lp + normal_log_pdf(x, mu1, v1);
            let t2 = lq + normal_log_pdf(x, mu2, v2);
            let m = t1.max(t2);
            let (e1, e2) = ((t1 - m).exp(), (t2 - m).exp());
            let w1 = e1 / (e1 + e2);
            let w2 = 1.0 - w1;

            // Component score vectors over (π, μ₁, μ₂, σ₁², σ₂²).
            let g1 = r1 / v1;
            let g2 = r2 / v2;
            let s1 = (r1 * r1 - v1) / (2.0 * v1 * v1);
            let s2 = (r2 * r2 - v2) / (2.0 * v2 * v2);
            let delta = [1.0 / pi + 1.0 / (1.0 - pi), g1, -g2, s1, -s2];

            // w₁·T₁ + w₂·T₂: within-component curvatures.
            h[(0, 0)] += -w1 / (pi * pi) - w2 / ((1.0 - pi) * (1.0 - pi));
            h[(1, 1)] += -w1 / v1;
            h[(1, 3)] += -w1 * r1 / (v1 * v1);
            h[(3, 3)] += w1 * (0.5 / (v1 * v1) - r1 * r1 / (v1 * v1 * v1));
            h[(2, 2)] += -w2 / v2;
            h[(2, 4)] += -w2 * r2 / (v2 * v2);
            h[(4, 4)] += w2 * (0.5 / (v2 * v2) - r2 * r2 / (v2 * v2 * v2));

            // Responsibility curvature: w₁w₂·δδᵀ (upper triangle).
            let ww = w1 * w2;
            for i in 0..MIXTURE_DIM {
                for j in i..MIXTURE_DIM {
                    h[(i, j)] += ww * delta[i] * delta[j];
                }
            }
        }

        // Priors.
        let a0 = self.priors.weight_concentration;
        h[(0, 0)] +=
            (a0 / 2.0 - 1.0) * (-1.0 / (pi * pi) - 1.0 / ((1.0 - pi) * (1.0 - pi)));
        for (k, &(mu, v)) in [(mu1, v1), (mu2, v2)].iter().enumerate() {
            let p = &self.priors.components[k];
            let (im, iv) = (1 + k, 3 + k);
            let d = mu - p.location;
            h[(im, im)] += -p.precision_mult / v;
            h[(im, iv)] += p.precision_mult * d / (v * v);
            h[(iv, iv)] += (p.shape + 1.5) / (v * v)
                - p.precision_mult * d * d / (v * v * v)
                - 2.0 * p.scale / (v * v * v);
        }

        // Mirror the upper triangle.
        for i in 0..MIXTURE_DIM {
            for j in (i + 1)..MIXTURE_DIM {
                h[(j, i)] = h[(i, j)];
            }
        }
        h
    }

    /// The joint posterior as a generic five-coordinate target with the
    /// analytic Hessian attached.
    pub fn model(&self) -> TargetModel {
        let m = self.clone();
        let h = self.clone();
        TargetModel::new("normal-mixture", MIXTURE_DIM, move |t: &[f64]| m.log_posterior(t))
            .with_hessian(move |t: &[f64]| h.hessian_at(t))
    }

    /// Run the latent-allocation Gibbs sampler.
    ///
    /// Each sweep draws allocations given the parameters, the weight given
    /// the allocation counts, and each component's `(μ, σ²)` from its
    /// conjugate update; the draw is then relabeled so `μ₁ < μ₂`. A sweep
    /// in which a component receives no observations falls back to that
    /// component's prior (the conjugate update with zero counts) and is
    /// counted. The first half of the chain is burn-in; moments are
    /// accumulated streaming, so long reference runs use constant memory.
    pub fn gibbs(&self, n_iter: usize, policy: RngPolicy) -> Result<MixtureGibbsRun> {
        self.gibbs_streaming(n_iter, policy, |_| Ok(()))
    }

    /// [`gibbs`](Self::gibbs), additionally handing every retained draw
    /// to `sink` as it is produced (e.g. a CSV row writer). The chain is
    /// identical to a plain run under the same policy.
    pub fn gibbs_streaming<F>(
        &self,
        n_iter: usize,
        policy: RngPolicy,
        mut sink: F,
    ) -> Result<MixtureGibbsRun>
    where
        F: FnMut(&[f64; MIXTURE_DIM]) -> Result<()>,
    {
        if self.data.len() < 2 {
            return Err(Error::invalid(
                "the Gibbs sampler needs at least two observations".to_string(),
            ));
        }
        if n_iter < MIN_MIXTURE_GIBBS_ITERS {
            return Err(Error::invalid(format!(
                "mixture Gibbs run of {n_iter} is below the minimum {MIN_MIXTURE_GIBBS_ITERS}"
            )));
        }
        let mut rng = policy.rng();
        let n = self.data.len();
        let a0 = self.priors.weight_concentration;

        // Deterministic spread start: components at the lower/upper data
        // quartiles, both variances at the overall variance.
        let mut sorted = self.data.clone();
        sorted.sort_by(f64::total_cmp);
        let overall_mean = self.data.iter().sum::<f64>() / n as f64;
        let overall_var = self
            .data
            .iter()
            .map(|x| (x - overall_mean) * (x - overall_mean))
            .sum::<f64>()
            / (n - 1) as f64;
        let mut theta = [
            0.5,
            sorted[n / 4],
            sorted[3 * n / 4],
            overall_var.max(1e-12),
            overall_var.max(1e-12),
        ];
        if theta[1] >= theta[2] {
            // Degenerate quartiles (clustered data): nudge apart.
            let sd = overall_var.max(1e-12).sqrt();
            theta[1] = overall_mean - sd;
            theta[2] = overall_mean + sd;
        }

        let n_burn = (n_iter as f64 * DEFAULT_BURN_IN).floor() as usize;
        let kept = n_iter - n_burn;
        let mut acc = MomentAccumulator::new(MIXTURE_DIM);
        let mut empty_sweeps = 0usize;
        let mut z = vec![false; n]; // true = component 1

        for t in 0..n_iter {
            let (pi, mu1, mu2, v1, v2) = (theta[0], theta[1], theta[2], theta[3], theta[4]);
            let (lp, lq) = (pi.ln(), (1.0 - pi).ln());

            // Allocations and component sufficient statistics.
            let mut n1 = 0usize;
            let mut sum1 = 0.0;
            let mut sum2 = 0.0;
            for (i, &x) in self.data.iter().enumerate() {
                let t1 = lp + normal_log_pdf(x, mu1, v1);
                let t2 = lq + normal_log_pdf(x, mu2, v2);
                let w1 = 1.0 / (1.0 + (t2 - t1).exp());
                let first = rng.random::<f64>() < w1;
                z[i] = first;
                if first {
                    n1 += 1;
                    sum1 += x;
                } else {
                    sum2 += x;
                }
            }
            let n2 = n - n1;
            if n1 == 0 || n2 == 0 {
                empty_sweeps += 1;
            }

            // Weight.
            theta[0] = BetaDist::new(a0 / 2.0 + n1 as f64, a0 / 2.0 + n2 as f64)
                .expect("posterior Beta parameters are positive")
                .sample(&mut rng);

            // Component blocks.
            for k in 0..2 {
                let (nk, sumk) = if k == 0 { (n1, sum1) } else { (n2, sum2) };
                let assigned = |i: usize| z[i] == (k == 0);
                let prior = &self.priors.components[k];
                let (c_star, d_star, e_star, f_star) = if nk == 0 {
                    (prior.location, prior.precision_mult, prior.shape, prior.scale)
                } else {
                    let xbar = sumk / nk as f64;
                    let ss: f64 = self
                        .data
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| assigned(*i))
                        .map(|(_, &x)| (x - xbar) * (x - xbar))
                        .sum();
                    let d_star = prior.precision_mult + nk as f64;
                    let shift = xbar - prior.location;
                    (
                        (prior.precision_mult * prior.location + sumk) / d_star,
                        d_star,
                        prior.shape + nk as f64 / 2.0,
                        prior.scale
                            + ss / 2.0
                            + prior.precision_mult * nk as f64 * shift * shift / (2.0 * d_star),
                    )
                };
                let g = Gamma::new(e_star, 1.0 / f_star)
                    .expect("posterior shape and scale are positive")
                    .sample(&mut rng);
                let v = 1.0 / g;
                let mu = Normal::new(c_star, (v / d_star).sqrt())
                    .expect("conditional sd is positive")
                    .sample(&mut rng);
                theta[1 + k] = mu;
                theta[3 + k] = v;
            }

            // Relabel so μ₁ < μ₂.
            if theta[1] > theta[2] {
                theta.swap(1, 2);
                theta.swap(3, 4);
                theta[0] = 1.0 - theta[0];
            }

            if t >= n_burn {
                acc.push(&theta);
                sink(&theta)?;
            }
        }

        Ok(MixtureGibbsRun {
            kept,
            mean: acc.mean(),
            cov: acc.covariance(),
            empty_component_sweeps: empty_sweeps,
        })
    }
}

/// Moments of a mixture Gibbs run.
#[derive(Clone, Debug)]
pub struct MixtureGibbsRun {
    /// Retained (post burn-in) sweep count.
    pub kept: usize,
    /// Posterior mean estimate of `(π, μ₁, μ₂, σ₁², σ₂²)`.
    pub mean: Vec<f64>,
    /// Posterior covariance estimate.
    pub cov: DMatrix<f64>,
    /// Sweeps in which some component had zero allocations.
    pub empty_component_sweeps: usize,
}

impl MixtureGibbsRun {
    /// Package the moments as a covariance estimate, with dispersion
    /// ratios taken against the given approximation variances.
    pub fn estimate(&self, vb_variance: &[f64]) -> Result<CovarianceEstimate> {
        CovarianceEstimate::from_covariance_matrix(MethodTag::Gibbs, &self.cov, vb_variance)
    }
}
