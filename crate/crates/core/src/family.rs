//! Marginal distribution families available to a factorized VB posterior.
//!
//! Each coordinate of a [`crate::vb::VbApproximation`] carries one of these
//! families. All families expose exact first and second moments (required by
//! every correction method), a log-density that returns `-inf` outside the
//! support (never an error), and a sampler.
//!
//! [`MarginalFamily::NormalGivenScale`] is the one conditional family: a
//! normal whose variance is a linked scale coordinate divided by a fixed
//! precision multiplier, as produced by conjugate normal–inverse-gamma
//! updates. Its marginal variance therefore depends on the linked
//! coordinate's mean and is resolved by the enclosing approximation.

use rand::Rng;
use rand_distr::{Beta as BetaDist, Distribution, Gamma, Normal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::Error;
use crate::Result;

const LN_2PI: f64 = 1.837877066409345483560659472811_f64;

/// One marginal factor of a VB approximation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MarginalFamily {
    /// Normal with mean and standard deviation.
    Normal { mean: f64, sd: f64 },
    /// Inverse gamma with shape `a > 2` and scale `b` (density
    /// `∝ x^{-(a+1)} e^{-b/x}`). The shape bound guarantees a finite
    /// variance, which every correction method needs.
    InverseGamma { shape: f64, scale: f64 },
    /// Beta on (0, 1).
    Beta { alpha: f64, beta: f64 },
    /// First coordinate of a Dirichlet vector; its marginal is
    /// `Beta(c₁, Σ c₂..)`, which is how it is evaluated and sampled.
    Dirichlet { concentration: Vec<f64> },
    /// Location–scale Student t with `df > 2` so the variance exists.
    ScaledT { df: f64, loc: f64, scale: f64 },
    /// Normal whose variance is `linked scale / scale_div`, where the
    /// linked scale is another coordinate of the same approximation
    /// (index `link`).
    NormalGivenScale { loc: f64, scale_div: f64, link: usize },
}

impl MarginalFamily {
    /// Short name for error messages.
    pub fn name(&self) -> &'static str {
        match self {
            MarginalFamily::Normal { .. } => "normal",
            MarginalFamily::InverseGamma { .. } => "inverse_gamma",
            MarginalFamily::Beta { .. } => "beta",
            MarginalFamily::Dirichlet { .. } => "dirichlet",
            MarginalFamily::ScaledT { .. } => "scaled_t",
            MarginalFamily::NormalGivenScale { .. } => "normal_given_scale",
        }
    }

    /// Index of the linked scale coordinate, for the conditional family.
    pub fn link(&self) -> Option<usize> {
        match self {
            MarginalFamily::NormalGivenScale { link, .. } => Some(*link),
            _ => None,
        }
    }

    /// Check parameter ranges (and that a link stays inside `dim`).
    pub fn validate(&self, dim: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidParameter(msg));
        match self {
            MarginalFamily::Normal { mean, sd } => {
                if !mean.is_finite() || !sd.is_finite() || *sd <= 0.0 {
                    return fail(format!("normal requires finite mean and sd > 0, got ({mean}, {sd})"));
                }
            }
            MarginalFamily::InverseGamma { shape, scale } => {
                if !(shape.is_finite() && scale.is_finite() && *shape > 2.0 && *scale > 0.0) {
                    return fail(format!(
                        "inverse_gamma requires shape > 2 (finite variance) and scale > 0, got ({shape}, {scale})"
                    ));
                }
            }
            MarginalFamily::Beta { alpha, beta } => {
                if !(alpha.is_finite() && beta.is_finite() && *alpha > 0.0 && *beta > 0.0) {
                    return fail(format!("beta requires positive parameters, got ({alpha}, {beta})"));
                }
            }
            MarginalFamily::Dirichlet { concentration } => {
                if concentration.len() < 2 {
                    return fail("dirichlet requires at least two concentrations".into());
                }
                if concentration.iter().any(|c| !c.is_finite() || *c <= 0.0) {
                    return fail(format!("dirichlet concentrations must be positive, got {concentration:?}"));
                }
            }
            MarginalFamily::ScaledT { df, loc, scale } => {
                if !(df.is_finite() && loc.is_finite() && scale.is_finite() && *df > 2.0 && *scale > 0.0) {
                    return fail(format!(
                        "scaled_t requires df > 2 (finite variance) and scale > 0, got ({df}, {loc}, {scale})"
                    ));
                }
            }
            MarginalFamily::NormalGivenScale { loc, scale_div, link } => {
                if !(loc.is_finite() && scale_div.is_finite() && *scale_div > 0.0) {
                    return fail(format!(
                        "normal_given_scale requires finite loc and scale_div > 0, got ({loc}, {scale_div})"
                    ));
                }
                if *link >= dim {
                    return fail(format!("link index {link} is outside dimension {dim}"));
                }
            }
        }
        Ok(())
    }

    /// Marginal mean. Exact for every family, including the conditional one
    /// (the conditional mean does not depend on the linked scale).
    pub fn mean(&self) -> f64 {
        match self {
            MarginalFamily::Normal { mean, .. } => *mean,
            MarginalFamily::InverseGamma { shape, scale } => scale / (shape - 1.0),
            MarginalFamily::Beta { alpha, beta } => alpha / (alpha + beta),
            MarginalFamily::Dirichlet { concentration } => {
                concentration[0] / concentration.iter().sum::<f64>()
            }
            MarginalFamily::ScaledT { loc, .. } => *loc,
            MarginalFamily::NormalGivenScale { loc, .. } => *loc,
        }
    }

    /// Marginal variance when it is self-contained; `None` for the
    /// conditional family, whose marginal variance is
    /// `E[linked scale] / scale_div` and is resolved by the approximation.
    pub fn standalone_variance(&self) -> Option<f64> {
        match self {
            MarginalFamily::Normal { sd, .. } => Some(sd * sd),
            MarginalFamily::InverseGamma { shape, scale } => {
                Some(scale * scale / ((shape - 1.0) * (shape - 1.0) * (shape - 2.0)))
            }
            MarginalFamily::Beta { alpha, beta } => {
                let s = alpha + beta;
                Some(alpha * beta / (s * s * (s + 1.0)))
            }
            MarginalFamily::Dirichlet { concentration } => {
                let (a, rest) = dirichlet_as_beta(concentration);
                MarginalFamily::Beta { alpha: a, beta: rest }.standalone_variance()
            }
            MarginalFamily::ScaledT { df, scale, .. } => Some(scale * scale * df / (df - 2.0)),
            MarginalFamily::NormalGivenScale { .. } => None,
        }
    }

    /// Log-density at `x`; `-inf` outside the support. `linked_scale` must
    /// be `Some` exactly for the conditional family (the enclosing
    /// approximation supplies the current value of the linked coordinate).
    pub fn log_pdf(&self, x: f64, linked_scale: Option<f64>) -> f64 {
        match self {
            MarginalFamily::Normal { mean, sd } => normal_log_pdf(x, *mean, sd * sd),
            MarginalFamily::InverseGamma { shape, scale } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                shape * scale.ln() - ln_gamma(*shape) - (shape + 1.0) * x.ln() - scale / x
            }
            MarginalFamily::Beta { alpha, beta } => beta_log_pdf(x, *alpha, *beta),
            MarginalFamily::Dirichlet { concentration } => {
                let (a, rest) = dirichlet_as_beta(concentration);
                beta_log_pdf(x, a, rest)
            }
            MarginalFamily::ScaledT { df, loc, scale } => {
                let z = (x - loc) / scale;
                ln_gamma((df + 1.0) / 2.0)
                    - ln_gamma(df / 2.0)
                    - 0.5 * (df * std::f64::consts::PI).ln()
                    - scale.ln()
                    - (df + 1.0) / 2.0 * (1.0 + z * z / df).ln()
            }
            MarginalFamily::NormalGivenScale { loc, scale_div, .. } => {
                let s = linked_scale.expect("conditional family evaluated without its linked scale");
                if s <= 0.0 {
                    // The linked coordinate is outside its own support; the
                    // joint density is already -inf through that factor.
                    return f64::NEG_INFINITY;
                }
                normal_log_pdf(x, *loc, s / scale_div)
            }
        }
    }

    /// Draw one value. Same `linked_scale` contract as [`Self::log_pdf`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, linked_scale: Option<f64>) -> f64 {
        match self {
            MarginalFamily::Normal { mean, sd } => {
                Normal::new(*mean, *sd).expect("validated").sample(rng)
            }
            MarginalFamily::InverseGamma { shape, scale } => {
                // 1/X ~ Gamma(shape, rate = scale) = Gamma(shape, scale = 1/scale).
                let g = Gamma::new(*shape, 1.0 / scale).expect("validated").sample(rng);
                1.0 / g
            }
            MarginalFamily::Beta { alpha, beta } => {
                BetaDist::new(*alpha, *beta).expect("validated").sample(rng)
            }
            MarginalFamily::Dirichlet { concentration } => {
                let (a, rest) = dirichlet_as_beta(concentration);
                BetaDist::new(a, rest).expect("validated").sample(rng)
            }
            MarginalFamily::ScaledT { df, loc, scale } => {
                loc + scale * StudentT::new(*df).expect("validated").sample(rng)
            }
            MarginalFamily::NormalGivenScale { loc, scale_div, .. } => {
                let s = linked_scale.expect("conditional family sampled without its linked scale");
                Normal::new(*loc, (s / scale_div).sqrt())
                    .expect("linked scale must be positive")
                    .sample(rng)
            }
        }
    }
}

fn dirichlet_as_beta(concentration: &[f64]) -> (f64, f64) {
    (concentration[0], concentration[1..].iter().sum())
}

/// Log-density of N(mean, variance) at `x`.
pub fn normal_log_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln() + d * d / variance)
}

fn beta_log_pdf(x: f64, alpha: f64, beta: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return f64::NEG_INFINITY;
    }
    (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_beta(alpha, beta)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}
