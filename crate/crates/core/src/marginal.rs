//! Projection-marginal correction: Laplace-style profile densities along
//! directions, acceptance-rate variance reads per direction, and a linear
//! moment system that assembles the full covariance from the reads.
//!
//! For a direction `α`, the unnormalized marginal density of `ω = αᵀθ` is
//! approximated by profiling: maximize `log p(θ)` over the slice
//! `{αᵀθ = ω}` and correct with the local curvature,
//!
//! ```text
//! log m(ω) = log p(θ_ω) − ½ log det(−R_ω) − ½ log(αᵀ(−R_ω)⁻¹ α),
//! ```
//!
//! where `θ_ω` is the constrained maximizer and `R_ω` the Hessian of
//! `log p` there. The correction is exact for Gaussian targets. Each
//! direction's variance is then read from a one-dimensional acceptance-rate
//! chain on `m`, and the reads `l_k ≈ α_kᵀ Σ α_k` form a linear system in
//! the variances and covariance products that is solved by least squares.

use std::cell::{Cell, RefCell};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::{CovarianceEstimate, MethodTag};
use crate::error::Error;
use crate::imh::{
    vbaimh_variance_exact, vbaimh_variance_pooled, EarTable, VbaimhDiagnosis, DEFAULT_BURN_IN,
    DEFAULT_SKEW_SCALE,
};
use crate::model::TargetModel;
use crate::optimize::{minimize, Options, Termination};
use crate::rng::RngPolicy;
use crate::vb::VbApproximation;
use crate::Result;

/// Gradient tolerance for the constrained profile maximization.
const PROFILE_GRAD_TOL: f64 = 1e-8;
/// Gradient sup-norm above which a stalled maximization is counted as a
/// soft failure.
const STALL_GRAD_TOL: f64 = 1e-4;
/// Relative floor for curvature eigenvalues when the negated Hessian at a
/// profile maximizer is not positive definite.
const CURVATURE_FLOOR_REL: f64 = 1e-10;

/// Profile (conditional-maximization) approximation to the marginal
/// log-density of `αᵀθ`.
///
/// The struct keeps interior-mutable state: a warm start carried between
/// slice values and counters for soft optimizer stalls, hard failures seen
/// through [`TkkProfile::chain_fn`], and curvature clamps. It is therefore
/// intended to be owned by a single chain, not shared across threads.
pub struct TkkProfile {
    model: TargetModel,
    alpha: DVector<f64>,
    alpha_norm2: f64,
    /// Orthonormal basis of the hyperplane direction space (p × (p−1)).
    null_basis: DMatrix<f64>,
    anchor: DVector<f64>,
    warm: RefCell<Option<DVector<f64>>>,
    stalls: Cell<usize>,
    failures: Cell<usize>,
    curvature_clamps: Cell<usize>,
}

impl TkkProfile {
    /// Build a profile along `alpha`; `anchor` (typically the approximation
    /// mean) seeds the constrained starts.
    pub fn new(model: &TargetModel, alpha: &[f64], anchor: &[f64]) -> Result<Self> {
        let p = model.dim();
        if alpha.len() != p || anchor.len() != p {
            return Err(Error::invalid(format!(
                "direction/anchor length must match model dimension {p}"
            )));
        }
        if !alpha.iter().all(|a| a.is_finite()) || alpha.iter().all(|a| *a == 0.0) {
            return Err(Error::invalid("direction must be finite and nonzero".to_string()));
        }
        let alpha = DVector::from_column_slice(alpha);
        let alpha_norm2 = alpha.norm_squared();

        // Householder reflection sending the unit direction to ∓e₁; its
        // remaining columns are an orthonormal basis of the hyperplane.
        let unit = &alpha / alpha.norm();
        let sign = if unit[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = unit.clone();
        v[0] += sign;
        let vtv = v.norm_squared();
        let reflector = DMatrix::identity(p, p) - (&v * v.transpose()) * (2.0 / vtv);
        let null_basis = reflector.columns(1, p - 1).clone_owned();

        Ok(TkkProfile {
            model: model.clone(),
            alpha,
            alpha_norm2,
            null_basis,
            anchor: DVector::from_column_slice(anchor),
            warm: RefCell::new(None),
            stalls: Cell::new(0),
            failures: Cell::new(0),
            curvature_clamps: Cell::new(0),
        })
    }

    fn plane_point(&self, omega: f64) -> DVector<f64> {
        let shift = (omega - self.alpha.dot(&self.anchor)) / self.alpha_norm2;
        &self.anchor + &self.alpha * shift
    }

    /// Profile log-marginal at `omega`.
    ///
    /// Errors with [`Error::ProfileDivergence`] when no feasible start
    /// exists on the slice or the maximization lands on a non-finite value
    /// (support boundary or severe multimodality).
    pub fn log_marginal(&self, omega: f64) -> Result<f64> {
        let p = self.model.dim();
        let base = self.plane_point(omega);

        let maximizer = if p == 1 {
            // The constraint pins the single coordinate; nothing to optimize.
            base
        } else {
            let objective = |z: &[f64]| {
                let theta = &base + &self.null_basis * DVector::from_column_slice(z);
                -self.model.log_density(theta.as_slice())
            };
            let opts = Options { grad_tol: PROFILE_GRAD_TOL, max_iters: 300, ..Options::default() };

            let warm_start = self.warm.borrow().clone();
            let mut outcome = None;
            let mut starts: Vec<DVector<f64>> = Vec::new();
            if let Some(w) = warm_start {
                starts.push(w);
            }
            starts.push(DVector::zeros(p - 1));
            for start in starts {
                let out = minimize(&objective, start.as_slice(), &opts);
                if out.termination != Termination::NonFiniteStart && out.value.is_finite() {
                    outcome = Some(out);
                    break;
                }
            }
            let outcome = outcome.ok_or_else(|| Error::ProfileDivergence {
                omega,
                detail: "no feasible start on the slice".to_string(),
            })?;
            if !outcome.converged() && outcome.grad_sup_norm > STALL_GRAD_TOL {
                self.stalls.set(self.stalls.get() + 1);
            }
            let z_opt = DVector::from_column_slice(&outcome.x);
            *self.warm.borrow_mut() = Some(z_opt.clone());
            &base + &self.null_basis * z_opt
        };

        let peak = self.model.log_density(maximizer.as_slice());
        if !peak.is_finite() {
            return Err(Error::ProfileDivergence {
                omega,
                detail: format!("log-density {peak} at the profile maximizer"),
            });
        }

        // Curvature correction on the negated Hessian; clamp stray
        // non-positive eigenvalues so boundary-adjacent slices degrade
        // gracefully instead of producing NaN.
        let neg_hessian = -self.model.hessian(maximizer.as_slice())?;
        let eigen = nalgebra::SymmetricEigen::new(neg_hessian);
        let max_abs = eigen.eigenvalues.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        let floor = (CURVATURE_FLOOR_REL * max_abs).max(1e-12);
        let mut log_det = 0.0;
        let mut quad = 0.0;
        let mut clamped = false;
        for (i, lambda) in eigen.eigenvalues.iter().enumerate() {
            let l = if *lambda < floor {
                clamped = true;
                floor
            } else {
                *lambda
            };
            log_det += l.ln();
            let proj = eigen.eigenvectors.column(i).dot(&self.alpha);
            quad += proj * proj / l;
        }
        if clamped {
            self.curvature_clamps.set(self.curvature_clamps.get() + 1);
        }
        Ok(peak - 0.5 * log_det - 0.5 * quad.ln())
    }

    /// Closure for use as a chain target: divergent slices evaluate to
    /// `-inf` (certain rejection) and are counted in [`failure_count`].
    ///
    /// [`failure_count`]: TkkProfile::failure_count
    pub fn chain_fn(&self) -> impl Fn(f64) -> f64 + '_ {
        move |omega| match self.log_marginal(omega) {
            Ok(v) => v,
            Err(_) => {
                self.failures.set(self.failures.get() + 1);
                f64::NEG_INFINITY
            }
        }
    }

    /// Hard profile failures seen through [`TkkProfile::chain_fn`].
    pub fn failure_count(&self) -> usize {
        self.failures.get()
    }

    /// Maximizations that stopped short of gradient tolerance.
    pub fn stall_count(&self) -> usize {
        self.stalls.get()
    }

    /// Slices where the negated Hessian needed eigenvalue clamping.
    pub fn curvature_clamp_count(&self) -> usize {
        self.curvature_clamps.get()
    }
}

/// One direction's variance read.
#[derive(Clone, Debug, Serialize)]
pub struct ProjectionRead {
    /// Direction the read was taken along.
    pub alpha: Vec<f64>,
    /// Estimated variance of `αᵀθ` under the target.
    pub l: f64,
    /// Acceptance-rate diagnostics from the two-stage read.
    pub diagnosis: VbaimhDiagnosis,
    /// Hard profile failures during the chains (treated as rejections).
    pub profile_failures: usize,
    /// Profile maximizations that stalled above gradient tolerance.
    pub profile_stalls: usize,
    /// Slices needing curvature clamping.
    pub curvature_clamps: usize,
}

/// Estimate the variance of `αᵀθ` by running the acceptance-rate read on
/// the profile marginal, proposing from the approximation's implied
/// projection `N(αᵀμ_q, αᵀ diag(var_q) α)`.
///
/// `chains` independent chains of length `n` are pooled into each
/// acceptance-rate estimate; `1` reproduces a plain single-chain read.
pub fn projection_variance(
    model: &TargetModel,
    vb: &VbApproximation,
    alpha: &[f64],
    table: &EarTable,
    n: usize,
    chains: usize,
    policy: RngPolicy,
) -> Result<ProjectionRead> {
    if vb.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "approximation dimension {} does not match model dimension {}",
            vb.dim(),
            model.dim()
        )));
    }
    let profile = TkkProfile::new(model, alpha, vb.mean())?;
    let center: f64 = alpha.iter().zip(vb.mean()).map(|(a, m)| a * m).sum();
    let proposal_variance: f64 = alpha.iter().zip(vb.variance()).map(|(a, v)| a * a * v).sum();
    let (l, diagnosis) = vbaimh_variance_pooled(
        profile.chain_fn(),
        center,
        proposal_variance,
        table,
        n,
        DEFAULT_BURN_IN,
        DEFAULT_SKEW_SCALE,
        chains,
        policy,
    )?;
    Ok(ProjectionRead {
        alpha: alpha.to_vec(),
        l,
        diagnosis,
        profile_failures: profile.failure_count(),
        profile_stalls: profile.stall_count(),
        curvature_clamps: profile.curvature_clamp_count(),
    })
}

/// [`projection_variance`] with the acceptance rates computed by the
/// deterministic quadrature functional instead of pooled chains.
///
/// The profile target, the proposal, and the read protocol are identical;
/// only the rate estimation changes, removing both the Monte Carlo noise
/// and the RNG dependence (same inputs always produce the same read). This
/// is the read used by the diagnosis pipeline; the chain-based variant
/// remains for sampling-based workflows and for studying the chains
/// themselves.
pub fn projection_variance_exact(
    model: &TargetModel,
    vb: &VbApproximation,
    alpha: &[f64],
    table: &EarTable,
) -> Result<ProjectionRead> {
    if vb.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "approximation dimension {} does not match model dimension {}",
            vb.dim(),
            model.dim()
        )));
    }
    let profile = TkkProfile::new(model, alpha, vb.mean())?;
    let center: f64 = alpha.iter().zip(vb.mean()).map(|(a, m)| a * m).sum();
    let proposal_variance: f64 = alpha.iter().zip(vb.variance()).map(|(a, v)| a * a * v).sum();
    let (l, diagnosis) = vbaimh_variance_exact(
        profile.chain_fn(),
        center,
        proposal_variance,
        table,
        DEFAULT_SKEW_SCALE,
    )?;
    Ok(ProjectionRead {
        alpha: alpha.to_vec(),
        l,
        diagnosis,
        profile_failures: profile.failure_count(),
        profile_stalls: profile.stall_count(),
        curvature_clamps: profile.curvature_clamp_count(),
    })
}

/// A validated set of projection directions.
///
/// The set is *complete* when its design matrix identifies all
/// `p(p+1)/2` covariance unknowns; smaller targeted sets are allowed for
/// reading individual projections but cannot be solved.
#[derive(Clone, Debug)]
pub struct DirectionSet {
    dim: usize,
    directions: Vec<DVector<f64>>,
    rank: usize,
}

/// Number of free parameters in a `p × p` covariance matrix.
pub fn covariance_unknowns(p: usize) -> usize {
    p * (p + 1) / 2
}

impl DirectionSet {
    /// Validate a direction list. Errors with [`Error::RankDeficient`] when
    /// the set has enough rows to identify the covariance but its design
    /// matrix is rank deficient (a degenerate choice of directions).
    pub fn new(directions: Vec<Vec<f64>>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::invalid("direction set is empty".to_string()));
        }
        let dim = directions[0].len();
        if dim == 0 {
            return Err(Error::invalid("directions must have positive dimension".to_string()));
        }
        let mut rows = Vec::with_capacity(directions.len());
        for d in &directions {
            if d.len() != dim {
                return Err(Error::invalid(format!(
                    "direction length {} does not match first direction length {dim}",
                    d.len()
                )));
            }
            if !d.iter().all(|x| x.is_finite()) || d.iter().all(|x| *x == 0.0) {
                return Err(Error::invalid("directions must be finite and nonzero".to_string()));
            }
            rows.push(DVector::from_column_slice(d));
        }
        let set = DirectionSet { dim, directions: rows, rank: 0 };
        let design = set.design_matrix();
        let rank = design.rank(1e-10 * design.amax().max(1.0));
        let needed = covariance_unknowns(dim);
        if directions.len() >= needed && rank < needed {
            return Err(Error::RankDeficient { rank, needed });
        }
        Ok(DirectionSet { rank, ..set })
    }

    /// Number of directions.
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    /// True when the set is empty (never, by construction).
    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Parameter dimension p.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The directions themselves.
    pub fn directions(&self) -> &[DVector<f64>] {
        &self.directions
    }

    /// Whether the design identifies all covariance unknowns.
    pub fn is_complete(&self) -> bool {
        self.rank == covariance_unknowns(self.dim)
    }

    /// Design matrix mapping `({σ_i²}, {c_ij})` to `{α_kᵀ Σ α_k}`, with the
    /// cross-product unknowns ordered lexicographically by `(i, j)`, `i<j`.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let p = self.dim;
        let cols = covariance_unknowns(p);
        let mut design = DMatrix::zeros(self.directions.len(), cols);
        for (k, a) in self.directions.iter().enumerate() {
            for i in 0..p {
                design[(k, i)] = a[i] * a[i];
            }
            let mut col = p;
            for i in 0..p {
                for j in (i + 1)..p {
                    design[(k, col)] = 2.0 * a[i] * a[j];
                    col += 1;
                }
            }
        }
        design
    }
}

/// The standard complete direction set: each axis `e_i`, then each
/// normalized pairwise sum `(e_i + e_j)/√2` — exactly `p(p+1)/2`
/// directions, full rank by construction.
pub fn default_directions(p: usize) -> Result<DirectionSet> {
    if p < 2 {
        return Err(Error::invalid(format!("direction sets need dimension >= 2, got {p}")));
    }
    let mut dirs = Vec::with_capacity(covariance_unknowns(p));
    for i in 0..p {
        let mut e = vec![0.0; p];
        e[i] = 1.0;
        dirs.push(e);
    }
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..p {
        for j in (i + 1)..p {
            let mut d = vec![0.0; p];
            d[i] = s;
            d[j] = s;
            dirs.push(d);
        }
    }
    DirectionSet::new(dirs)
}

/// [`default_directions`] plus the pairwise differences `(e_i − e_j)/√2`,
/// over-determining the moment system for noise robustness.
pub fn extended_directions(p: usize) -> Result<DirectionSet> {
    let base = default_directions(p)?;
    let mut dirs: Vec<Vec<f64>> =
        base.directions().iter().map(|d| d.as_slice().to_vec()).collect();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..p {
        for j in (i + 1)..p {
            let mut d = vec![0.0; p];
            d[i] = s;
            d[j] = -s;
            dirs.push(d);
        }
    }
    DirectionSet::new(dirs)
}

/// Solve the moment system `α_kᵀ Σ α_k = l_k` for the covariance by least
/// squares and package it against the approximation's variances.
///
/// Errors: [`Error::RankDeficient`] when the direction set cannot identify
/// all unknowns; [`Error::NegativeVariance`] when a solved variance is not
/// positive (inconsistent readings).
pub fn solve_moment_system(
    directions: &DirectionSet,
    l_values: &[f64],
    vb: &VbApproximation,
) -> Result<CovarianceEstimate> {
    let p = directions.dim();
    if vb.dim() != p {
        return Err(Error::invalid(format!(
            "approximation dimension {} does not match direction dimension {p}",
            vb.dim()
        )));
    }
    if l_values.len() != directions.len() {
        return Err(Error::invalid(format!(
            "{} readings for {} directions",
            l_values.len(),
            directions.len()
        )));
    }
    if !l_values.iter().all(|l| l.is_finite()) {
        return Err(Error::invalid("variance readings must be finite".to_string()));
    }
    if !directions.is_complete() {
        return Err(Error::RankDeficient {
            rank: directions.rank,
            needed: covariance_unknowns(p),
        });
    }

    let design = directions.design_matrix();
    let rhs = DVector::from_column_slice(l_values);
    let svd = design.svd(true, true);
    let solution = svd.solve(&rhs, 1e-12).map_err(|e| Error::invalid(e.to_string()))?;

    let sigma2: Vec<f64> = solution.as_slice()[..p].to_vec();
    for (i, s2) in sigma2.iter().enumerate() {
        if !(*s2 > 0.0) {
            return Err(Error::NegativeVariance { index: i, value: *s2 });
        }
    }
    let sd: Vec<f64> = sigma2.iter().map(|s| s.sqrt()).collect();
    let mut rho = DMatrix::identity(p, p);
    let mut col = p;
    for i in 0..p {
        for j in (i + 1)..p {
            let r = solution[col] / (sd[i] * sd[j]);
            rho[(i, j)] = r;
            rho[(j, i)] = r;
            col += 1;
        }
    }
    CovarianceEstimate::new(MethodTag::Marginal, sigma2, rho, vb.variance())
}

/// Render reads as CSV: `alpha_1,...,alpha_p,acceptance,l` (the acceptance
/// column is the pilot rate at the nominal proposal variance).
pub fn readings_csv(reads: &[ProjectionRead]) -> String {
    let mut out = String::new();
    if reads.is_empty() {
        return out;
    }
    let p = reads[0].alpha.len();
    for i in 1..=p {
        let _ = write!(out, "alpha_{i},");
    }
    out.push_str("acceptance,l\n");
    for read in reads {
        for a in &read.alpha {
            let _ = write!(out, "{a:.6},");
        }
        let _ = writeln!(out, "{:.6},{:.6e}", read.diagnosis.pilot_rate, read.l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::normal_log_pdf;
    use crate::imh::EarTable;
    use crate::models::mvn::MvnSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn demo_projection(spec: &MvnSpec, alpha: &[f64]) -> f64 {
        let sigma = spec.covariance_matrix();
        let a = DVector::from_column_slice(alpha);
        (a.transpose() * sigma * a)[(0, 0)]
    }

    #[test]
    fn profile_matches_exact_gaussian_marginal() {
        // Profiling with the curvature correction is exact for Gaussians:
        // differences along the slice grid must match the projected normal.
        let spec = MvnSpec::demo3();
        let model = spec.model().unwrap();
        let mu = [0.0, 0.0, 0.0];
        for alpha in [
            vec![1.0, 0.0, 0.0],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            vec![0.4, -1.2, 0.7],
        ] {
            let profile = TkkProfile::new(&model, &alpha, &mu).unwrap();
            let center: f64 = 0.0;
            let var = demo_projection(&spec, &alpha);
            let sd = var.sqrt();
            let anchor_value = profile.log_marginal(center).unwrap();
            for k in 0..21 {
                let omega = center + sd * (-3.0 + 0.3 * k as f64);
                let got = profile.log_marginal(omega).unwrap() - anchor_value;
                let want = normal_log_pdf(omega, center, var) - normal_log_pdf(center, center, var);
                assert!(
                    (got - want).abs() < 1e-6,
                    "alpha {alpha:?}, omega {omega}: {got} vs {want}"
                );
            }
            assert_eq!(profile.failure_count(), 0);
            assert_eq!(profile.curvature_clamp_count(), 0);
        }
    }

    #[test]
    fn one_dimensional_profile_reduces_to_the_density() {
        // With p = 1 the slice pins the whole parameter and the two
        // curvature terms cancel, for any target, not just Gaussians.
        let model = TargetModel::new("quartic", 1, |t: &[f64]| {
            -0.25 * t[0].powi(4) - 0.5 * t[0] * t[0]
        });
        let profile = TkkProfile::new(&model, &[1.0], &[0.0]).unwrap();
        for omega in [-2.0, -0.7, 0.0, 0.3, 1.9] {
            let got = profile.log_marginal(omega).unwrap() - profile.log_marginal(0.0).unwrap();
            let want = model.log_density(&[omega]) - model.log_density(&[0.0]);
            assert_relative_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn slice_outside_support_diverges() {
        let model = TargetModel::new("half-plane", 2, |t: &[f64]| {
            if t[0] + t[1] > 0.0 {
                -0.5 * (t[0] * t[0] + t[1] * t[1])
            } else {
                f64::NEG_INFINITY
            }
        });
        let alpha = [std::f64::consts::FRAC_1_SQRT_2; 2];
        let profile = TkkProfile::new(&model, &alpha, &[1.0, 1.0]).unwrap();
        // ω = αᵀθ = (θ₁+θ₂)/√2, so ω < 0 puts the whole slice out of support.
        assert!(profile.log_marginal(2.0).is_ok());
        let err = profile.log_marginal(-1.0);
        assert!(matches!(err, Err(Error::ProfileDivergence { .. })), "{err:?}");
        // The chain view turns that into a rejection, not an error.
        let f = profile.chain_fn();
        assert_eq!(f(-1.0), f64::NEG_INFINITY);
        assert_eq!(profile.failure_count(), 1);
    }

    #[test]
    fn projection_read_recovers_a_matched_variance() {
        // When the approximation already has the true variance along e₁,
        // the proposal equals the (exact) profile marginal and the read
        // returns that variance.
        let spec = MvnSpec::from_correlations(vec![1.0, -2.0], &[4.0, 1.0], &[0.0]).unwrap();
        let model = spec.model().unwrap();
        let vb = VbApproximation::independent_normal(&[1.0, -2.0], &[4.0, 1.0]).unwrap();
        let read = projection_variance(
            &model,
            &vb,
            &[1.0, 0.0],
            EarTable::standard(),
            6000,
            1,
            RngPolicy::new(11),
        )
        .unwrap();
        assert_relative_eq!(read.l, 4.0, max_relative = 0.07);
        assert!(read.diagnosis.pilot_rate > 0.95);
        assert_eq!(read.profile_failures, 0);
    }

    #[test]
    fn exact_projection_read_nails_the_demo_directions() {
        // On a Gaussian target the profile marginal is exact, so the
        // deterministic read must recover every projected variance to the
        // quadrature + table-interpolation accuracy — including the widest
        // coordinate, where finite chains are hopelessly noisy.
        let spec = MvnSpec::demo3();
        let model = spec.model().unwrap();
        let vb = MvnSpec::demo3_vb();
        let sigma = DMatrix::from_fn(3, 3, |i, j| spec.covariance[i][j]);
        for alpha in [
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0],
        ] {
            let a = DVector::from_column_slice(&alpha);
            let truth = (a.transpose() * &sigma * &a)[(0, 0)];
            let read = projection_variance_exact(&model, &vb, &alpha, EarTable::standard())
                .unwrap();
            assert_relative_eq!(read.l, truth, max_relative = 5e-3);
            assert_eq!(read.profile_failures, 0);
        }
    }

    #[test]
    fn projection_read_is_deterministic() {
        let spec = MvnSpec::demo3();
        let model = spec.model().unwrap();
        let vb = MvnSpec::demo3_vb();
        let alpha = [1.0, 1.0, -1.0];
        let a = projection_variance(
            &model,
            &vb,
            &alpha,
            EarTable::standard(),
            3000,
            2,
            RngPolicy::new(5),
        )
        .unwrap();
        let b = projection_variance(
            &model,
            &vb,
            &alpha,
            EarTable::standard(),
            3000,
            2,
            RngPolicy::new(5),
        )
        .unwrap();
        assert_eq!(a.l, b.l);
        assert_eq!(a.diagnosis.pilot_rate, b.diagnosis.pilot_rate);
    }

    #[test]
    fn moment_solve_is_exact_on_exact_readings() {
        let dirs = DirectionSet::new(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
        ])
        .unwrap();
        // Σ = [[4, 3], [3, 9]]: projections 4, 9, and (4+9+6)/2 = 9.5.
        let vb = VbApproximation::independent_normal(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let est = solve_moment_system(&dirs, &[4.0, 9.0, 9.5], &vb).unwrap();
        assert_relative_eq!(est.sigma2[0], 4.0, epsilon = 1e-10);
        assert_relative_eq!(est.sigma2[1], 9.0, epsilon = 1e-10);
        assert_relative_eq!(est.rho[0][1], 0.5, epsilon = 1e-10);
        assert_eq!(est.method, MethodTag::Marginal);
    }

    #[test]
    fn six_reading_demo_solve_matches_hand_solution() {
        // Six slice readings on the 3-d demo's standardized scale; the
        // reference solution below is an independent least-squares solve of
        // the same 6x6 linear system.
        let third = 1.0 / 3.0;
        let dirs = DirectionSet::new(vec![
            vec![third, third, third],
            vec![third, -third, third],
            vec![third, third, -third],
            vec![third, -third, -third],
            vec![third, 0.5 * third, third],
            vec![0.5 * third, 1.5 * third, third],
        ])
        .unwrap();
        let reads = [1.94, 1.86, 2.12, 0.47, 1.52, 1.94];
        let vb = VbApproximation::independent_normal(&[0.0; 3], &[1.0; 3]).unwrap();
        let est = solve_moment_system(&dirs, &reads, &vb).unwrap();
        let sd: Vec<f64> = est.sigma2.iter().map(|s| s.sqrt()).collect();
        assert_relative_eq!(sd[0], 1.591383, epsilon = 1e-5);
        assert_relative_eq!(sd[1], 2.190890, epsilon = 1e-5);
        assert_relative_eq!(sd[2], 2.654242, epsilon = 1e-5);
        assert_relative_eq!(est.rho[0][1], 0.558217, epsilon = 1e-5);
        assert_relative_eq!(est.rho[0][2], 0.322272, epsilon = 1e-5);
        assert_relative_eq!(est.rho[1][2], -0.303732, epsilon = 1e-5);
    }

    #[test]
    fn default_direction_sets_are_complete() {
        for p in 2..=5 {
            let set = default_directions(p).unwrap();
            assert_eq!(set.len(), covariance_unknowns(p));
            assert!(set.is_complete());
            let ext = extended_directions(p).unwrap();
            assert_eq!(ext.len(), covariance_unknowns(p) + p * (p - 1) / 2);
            assert!(ext.is_complete());
        }
        assert_eq!(default_directions(5).unwrap().len(), 15);
    }

    #[test]
    fn degenerate_direction_sets_are_rejected() {
        // Three rows for three unknowns, but e₁ repeats: rank deficient.
        let err = DirectionSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(matches!(err, Err(Error::RankDeficient { rank: 2, needed: 3 })));
        // A targeted subset is fine to build but cannot be solved.
        let subset = DirectionSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(!subset.is_complete());
        let vb = VbApproximation::independent_normal(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let err = solve_moment_system(&subset, &[1.0, 1.0], &vb);
        assert!(matches!(err, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn inconsistent_readings_yield_negative_variance() {
        let dirs = default_directions(2).unwrap();
        let vb = VbApproximation::independent_normal(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let err = solve_moment_system(&dirs, &[-0.5, 1.0, 1.0], &vb);
        assert!(matches!(err, Err(Error::NegativeVariance { index: 0, .. })));
    }

    #[test]
    fn readings_serialize_to_csv() {
        let spec = MvnSpec::from_correlations(vec![0.0], &[1.0], &[]).unwrap();
        let model = spec.model().unwrap();
        let vb = VbApproximation::independent_normal(&[0.0], &[1.0]).unwrap();
        let read = projection_variance(
            &model,
            &vb,
            &[1.0],
            EarTable::standard(),
            3000,
            1,
            RngPolicy::new(3),
        )
        .unwrap();
        let csv = readings_csv(&[read]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("alpha_1,acceptance,l"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("1.000000,"), "{row}");
        assert_eq!(row.split(',').count(), 3);
    }

    fn random_spd(p: usize, seed: u64) -> (Vec<f64>, Vec<Vec<f64>>) {
        use rand::Rng as _;
        let mut rng = RngPolicy::new(seed).rng();
        let raw = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let spd = &raw * raw.transpose() + DMatrix::identity(p, p) * 0.5;
        let mean = vec![0.0; p];
        let cov: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| spd[(i, j)]).collect()).collect();
        (mean, cov)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn solve_inverts_exact_forward_map(p in 2usize..=4, seed in 0u64..2000) {
            let (_, cov) = random_spd(p, seed);
            let sigma = DMatrix::from_fn(p, p, |i, j| cov[i][j]);
            let dirs = default_directions(p).unwrap();
            let reads: Vec<f64> = dirs
                .directions()
                .iter()
                .map(|a| (a.transpose() * &sigma * a)[(0, 0)])
                .collect();
            let vb = VbApproximation::independent_normal(&vec![0.0; p], &vec![1.0; p]).unwrap();
            let est = solve_moment_system(&dirs, &reads, &vb).unwrap();
            let implied = est.implied_covariance();
            for i in 0..p {
                for j in 0..p {
                    prop_assert!((implied[(i, j)] - sigma[(i, j)]).abs() < 1e-8,
                        "({i},{j}): {} vs {}", implied[(i, j)], sigma[(i, j)]);
                }
            }
        }

        #[test]
        fn direction_scaling_leaves_the_solution_unchanged(scale in 0.2f64..5.0, seed in 0u64..2000) {
            let p = 3;
            let (_, cov) = random_spd(p, seed);
            let sigma = DMatrix::from_fn(p, p, |i, j| cov[i][j]);
            let base = default_directions(p).unwrap();
            let scaled = DirectionSet::new(
                base.directions().iter().map(|a| (a * scale).as_slice().to_vec()).collect(),
            ).unwrap();
            let vb = VbApproximation::independent_normal(&vec![0.0; p], &vec![1.0; p]).unwrap();
            // Scaling α by c multiplies each reading by c²; the recovered
            // covariance must not move.
            let reads: Vec<f64> = base.directions().iter()
                .map(|a| (a.transpose() * &sigma * a)[(0, 0)]).collect();
            let scaled_reads: Vec<f64> = reads.iter().map(|l| l * scale * scale).collect();
            let est_a = solve_moment_system(&base, &reads, &vb).unwrap();
            let est_b = solve_moment_system(&scaled, &scaled_reads, &vb).unwrap();
            for i in 0..p {
                prop_assert!((est_a.sigma2[i] - est_b.sigma2[i]).abs() < 1e-8);
            }
        }
    }
}
