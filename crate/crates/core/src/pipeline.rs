//! Orchestration: run one or more correction methods on a model and
//! approximation pair.
//!
//! Acceptance-rate reads default to the deterministic quadrature mode
//! ([`ReadMode::Exact`]); switching to [`ReadMode::Chain`] runs finite
//! Metropolis-Hastings chains instead, each method drawing from its own
//! stream block of the run seed ([`crate::rng`]) so method results are
//! independent of which methods run together, of thread scheduling, and of
//! each other. A [`DiagnoseOutcome`] carries the per-method artifacts plus
//! a [`FlagSummary`] that front ends use to distinguish a clean run from a
//! completed-but-flagged one.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{corrected_covariance, fit_affine, AffineFit, AffineStructure};
use crate::covariance::{CovarianceEstimate, MethodTag};
use crate::error::Error;
use crate::imh::{EarTable, MIN_READ_LEN};
use crate::marginal::{
    default_directions, projection_variance, projection_variance_exact, solve_moment_system,
    ProjectionRead,
};
use crate::model::TargetModel;
use crate::rng::{RngPolicy, STREAM_BLOCK_AFFINE, STREAM_BLOCK_MARGINAL, STREAM_BLOCK_STEPWISE};
use crate::stepwise::{
    read_stepwise, read_stepwise_exact, solve_stepwise, StepwiseState, MAX_PAIR_CHAINS,
};
use crate::vb::VbApproximation;
use crate::Result;

/// Which correction method(s) to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    /// Affine transformation fit only.
    Affine,
    /// Marginal projection reads only.
    Marginal,
    /// Conditional stepwise reads only.
    Stepwise,
    /// All three methods.
    All,
}

impl MethodChoice {
    fn wants_affine(self) -> bool {
        matches!(self, MethodChoice::Affine | MethodChoice::All)
    }
    fn wants_marginal(self) -> bool {
        matches!(self, MethodChoice::Marginal | MethodChoice::All)
    }
    fn wants_stepwise(self) -> bool {
        matches!(self, MethodChoice::Stepwise | MethodChoice::All)
    }
}

impl std::str::FromStr for MethodChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(MethodChoice::Affine),
            "marginal" => Ok(MethodChoice::Marginal),
            "stepwise" => Ok(MethodChoice::Stepwise),
            "all" => Ok(MethodChoice::All),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected affine, marginal, stepwise, or all)"
            ))),
        }
    }
}

impl std::fmt::Display for MethodChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MethodChoice::Affine => "affine",
            MethodChoice::Marginal => "marginal",
            MethodChoice::Stepwise => "stepwise",
            MethodChoice::All => "all",
        })
    }
}

/// How the marginal and stepwise methods obtain their acceptance rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadMode {
    /// Deterministic quadrature of the acceptance-rate integral: no Monte
    /// Carlo noise, no seed dependence. The default.
    #[default]
    Exact,
    /// Finite pooled Metropolis-Hastings chains. Seed-dependent and noisy
    /// (realized rates are heavy-tailed at large variance ratios), but
    /// exercises the same sampler a practitioner would run.
    Chain,
}

impl std::str::FromStr for ReadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ReadMode::Exact),
            "chain" => Ok(ReadMode::Chain),
            other => Err(Error::Config(format!(
                "unknown read mode {other:?} (expected exact or chain)"
            ))),
        }
    }
}

/// Tuning knobs shared by the methods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSettings {
    /// Acceptance-rate read mode for the marginal and stepwise methods.
    pub read_mode: ReadMode,
    /// Chain length of every acceptance-rate read (chain mode only).
    pub chain_len: usize,
    /// Independent chains pooled into each read (chain mode only).
    pub chains: usize,
    /// Sample count for the affine fit.
    pub affine_samples: usize,
    /// Structure of the fitted affine matrix.
    pub affine_structure: AffineStructure,
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            read_mode: ReadMode::Exact,
            chain_len: 100_000,
            chains: 8,
            affine_samples: 4_000,
            affine_structure: AffineStructure::LowerTriangular,
        }
    }
}

impl MethodSettings {
    /// Boundary validation for deserialized settings.
    pub fn validate(&self) -> Result<()> {
        if self.chain_len < MIN_READ_LEN {
            return Err(Error::Config(format!(
                "chain_len {} is below the minimum read length {MIN_READ_LEN}",
                self.chain_len
            )));
        }
        if self.chains == 0 || self.chains > MAX_PAIR_CHAINS {
            return Err(Error::Config(format!(
                "chains must lie in 1..={MAX_PAIR_CHAINS}, got {}",
                self.chains
            )));
        }
        if self.affine_samples < 100 {
            return Err(Error::Config(format!(
                "affine_samples {} is below the minimum 100",
                self.affine_samples
            )));
        }
        Ok(())
    }
}

/// Affine method artifacts.
#[derive(Clone, Debug)]
pub struct AffineOutcome {
    /// The fitted transformation.
    pub fit: AffineFit,
    /// Corrected covariance.
    pub estimate: CovarianceEstimate,
}

/// Marginal projection method artifacts.
#[derive(Clone, Debug)]
pub struct MarginalOutcome {
    /// Per-direction variance reads with their acceptance diagnostics.
    pub reads: Vec<ProjectionRead>,
    /// Covariance solved from the moment system.
    pub estimate: CovarianceEstimate,
}

/// Stepwise conditional method artifacts.
#[derive(Clone, Debug)]
pub struct StepwiseOutcome {
    /// Stage-1/stage-2 reads with their acceptance diagnostics.
    pub state: StepwiseState,
    /// Covariance recovered from the reads.
    pub estimate: CovarianceEstimate,
}

/// Everything a diagnose run produced.
#[derive(Clone, Debug, Default)]
pub struct DiagnoseOutcome {
    /// Affine artifacts, when requested.
    pub affine: Option<AffineOutcome>,
    /// Marginal artifacts, when requested.
    pub marginal: Option<MarginalOutcome>,
    /// Stepwise artifacts, when requested.
    pub stepwise: Option<StepwiseOutcome>,
}

/// Aggregated warning counters across every read and estimate of a run.
///
/// `profile_*` counters are informational (hard failures already error);
/// the others make [`FlagSummary::any`] true, which front ends report as
/// "completed with flags".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlagSummary {
    /// Reads whose confirmation stage contradicted the normal-read model.
    pub non_normal_reads: usize,
    /// Reads that needed a one-time acceptance-table extension.
    pub grid_extended_reads: usize,
    /// Estimates whose correlations were clamped into (-1, 1).
    pub correlation_clamped: bool,
    /// Estimates whose implied covariance was not positive semidefinite.
    pub indefinite: bool,
    /// Profile slice maximizations that failed hard during chains.
    pub profile_failures: usize,
    /// Profile maximizations that stalled above gradient tolerance.
    pub profile_stalls: usize,
    /// Profile slices that needed curvature clamping.
    pub curvature_clamps: usize,
}

impl FlagSummary {
    /// True when the run completed but produced findings a user should
    /// look at (non-normal reads, clamped or indefinite estimates,
    /// acceptance-table extensions).
    pub fn any(&self) -> bool {
        self.non_normal_reads > 0
            || self.grid_extended_reads > 0
            || self.correlation_clamped
            || self.indefinite
    }

    fn absorb_diagnosis(&mut self, d: &crate::imh::VbaimhDiagnosis) {
        if d.non_normal {
            self.non_normal_reads += 1;
        }
        if d.grid_extended {
            self.grid_extended_reads += 1;
        }
    }

    fn absorb_estimate(&mut self, e: &CovarianceEstimate) {
        self.correlation_clamped |= e.correlation_clamped;
        self.indefinite |= e.indefinite;
    }
}

impl DiagnoseOutcome {
    /// The estimates produced, in method order (affine, marginal,
    /// stepwise).
    pub fn estimates(&self) -> Vec<&CovarianceEstimate> {
        let mut out = Vec::new();
        if let Some(a) = &self.affine {
            out.push(&a.estimate);
        }
        if let Some(m) = &self.marginal {
            out.push(&m.estimate);
        }
        if let Some(s) = &self.stepwise {
            out.push(&s.estimate);
        }
        out
    }

    /// Aggregate warning counters across all methods that ran.
    pub fn flags(&self) -> FlagSummary {
        let mut f = FlagSummary::default();
        if let Some(a) = &self.affine {
            f.absorb_estimate(&a.estimate);
        }
        if let Some(m) = &self.marginal {
            for r in &m.reads {
                f.absorb_diagnosis(&r.diagnosis);
                f.profile_failures += r.profile_failures;
                f.profile_stalls += r.profile_stalls;
                f.curvature_clamps += r.curvature_clamps;
            }
            f.absorb_estimate(&m.estimate);
        }
        if let Some(s) = &self.stepwise {
            for d in &s.state.step1_diagnosis {
                f.absorb_diagnosis(d);
            }
            for (d1, d2) in &s.state.step2_diagnosis {
                f.absorb_diagnosis(d1);
                f.absorb_diagnosis(d2);
            }
            f.absorb_estimate(&s.estimate);
        }
        f
    }
}

/// Run the affine fit under the affine stream block of `seed`.
pub fn run_affine(
    model: &TargetModel,
    vb: &VbApproximation,
    settings: &MethodSettings,
    seed: u64,
) -> Result<AffineOutcome> {
    settings.validate()?;
    let policy = RngPolicy::new(seed).job(STREAM_BLOCK_AFFINE, 0);
    let fit = fit_affine(model, vb, settings.affine_structure, settings.affine_samples, policy)?;
    let estimate = corrected_covariance(&fit, vb)?;
    Ok(AffineOutcome { fit, estimate })
}

/// Run the marginal projection method: one read per standardized default
/// direction, then the moment-system solve in the standardized space.
///
/// Directions are laid out in the approximation-standardized space
/// (`y_i = (θ_i − μ_i)/sd_i`), where the proposal projects to unit variance
/// along every direction. This keeps mixed-coordinate reads balanced when
/// raw parameter scales differ by orders of magnitude, and it conditions
/// the moment system: both its design entries and its unknowns stay O(1).
/// The solved covariance is mapped back to the raw axes at the end
/// (correlations are unchanged by the rescaling). In chain mode, reads run
/// under the marginal stream block of `seed`.
pub fn run_marginal(
    model: &TargetModel,
    vb: &VbApproximation,
    table: &EarTable,
    settings: &MethodSettings,
    seed: u64,
) -> Result<MarginalOutcome> {
    settings.validate()?;
    let p = model.dim();
    let directions = default_directions(p)?;
    let sd: Vec<f64> = vb.variance().iter().map(|v| v.sqrt()).collect();
    // Raw-axis functional reading the same linear combination as each
    // standardized direction: βᵀθ = αᵀy + const with β_i = α_i / sd_i.
    let betas: Vec<Vec<f64>> = directions
        .directions()
        .iter()
        .map(|a| a.iter().zip(&sd).map(|(ai, s)| ai / s).collect())
        .collect();
    let reads: Vec<ProjectionRead> = match settings.read_mode {
        ReadMode::Exact => betas
            .par_iter()
            .map(|beta| projection_variance_exact(model, vb, beta, table))
            .collect::<Result<_>>()?,
        ReadMode::Chain => {
            let base = RngPolicy::new(seed).job(STREAM_BLOCK_MARGINAL, 0);
            betas
                .par_iter()
                .enumerate()
                .map(|(k, beta)| {
                    projection_variance(
                        model,
                        vb,
                        beta,
                        table,
                        settings.chain_len,
                        settings.chains,
                        base.job_at(k as u64),
                    )
                })
                .collect::<Result<_>>()?
        }
    };
    let l_values: Vec<f64> = reads.iter().map(|r| r.l).collect();
    // Solve against the unit approximation of the standardized space, then
    // rescale the variances back to the raw axes.
    let unit = VbApproximation::independent_normal(&vec![0.0; p], &vec![1.0; p])?;
    let standardized = solve_moment_system(&directions, &l_values, &unit)?;
    let sigma2: Vec<f64> =
        standardized.sigma2.iter().zip(vb.variance()).map(|(w, v)| w * v).collect();
    let mut rho = DMatrix::identity(p, p);
    for i in 0..p {
        for j in 0..p {
            rho[(i, j)] = standardized.rho[i][j];
        }
    }
    let mut estimate = CovarianceEstimate::new(MethodTag::Marginal, sigma2, rho, vb.variance())?;
    // Rescaling preserves clamping (already applied) and definiteness
    // (congruence), so carry the solve's flags over.
    estimate.correlation_clamped |= standardized.correlation_clamped;
    estimate.indefinite |= standardized.indefinite;
    Ok(MarginalOutcome { reads, estimate })
}

/// Run the stepwise conditional method. In chain mode, reads run under the
/// stepwise stream block of `seed`; in exact mode the seed is unused.
pub fn run_stepwise(
    model: &TargetModel,
    vb: &VbApproximation,
    table: &EarTable,
    settings: &MethodSettings,
    seed: u64,
) -> Result<StepwiseOutcome> {
    settings.validate()?;
    let state = match settings.read_mode {
        ReadMode::Exact => read_stepwise_exact(model, vb, table)?,
        ReadMode::Chain => {
            let base = RngPolicy::new(seed).job(STREAM_BLOCK_STEPWISE, 0);
            read_stepwise(model, vb, table, settings.chain_len, settings.chains, base)?
        }
    };
    let estimate = solve_stepwise(&state, vb)?;
    Ok(StepwiseOutcome { state, estimate })
}

/// Run the chosen method(s). Methods run sequentially (each is
/// internally parallel) on disjoint stream blocks, so the outcome of one
/// never perturbs another.
pub fn run_methods(
    choice: MethodChoice,
    model: &TargetModel,
    vb: &VbApproximation,
    table: &EarTable,
    settings: &MethodSettings,
    seed: u64,
) -> Result<DiagnoseOutcome> {
    let mut out = DiagnoseOutcome::default();
    if choice.wants_affine() {
        out.affine = Some(run_affine(model, vb, settings, seed)?);
    }
    if choice.wants_marginal() {
        out.marginal = Some(run_marginal(model, vb, table, settings, seed)?);
    }
    if choice.wants_stepwise() {
        out.stepwise = Some(run_stepwise(model, vb, table, settings, seed)?);
    }
    Ok(out)
}
