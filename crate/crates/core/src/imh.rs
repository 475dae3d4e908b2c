//! Independence Metropolis–Hastings machinery and the expected acceptance
//! rate (EAR) table.
//!
//! For a univariate normal target `N(c, v·s²)` and an independence sampler
//! proposing from `N(c, s²)`, the stationary expected acceptance rate
//! depends only on the variance ratio `v` and is strictly decreasing in `v`
//! for `v ≥ 1` (and symmetric under `v ↔ 1/v`). Tabulating that function
//! once lets an observed acceptance rate be inverted into a variance-ratio
//! estimate; a confirmation run disambiguates wider-than-proposal targets
//! from narrower ones and flags non-normal shapes.

use std::io::{BufRead, Write};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Error;
use crate::rng::RngPolicy;
use crate::Result;

/// Acceptance rate above which a confirmation run is considered to have
/// validated the variance-ratio read.
pub const CONFIRMATION_THRESHOLD: f64 = 0.95;
/// Default fraction of a chain discarded as burn-in.
pub const DEFAULT_BURN_IN: f64 = 0.5;
/// Default shrink factor applied to a variance read when the confirmation
/// run indicates a non-normal (typically skewed) target.
pub const DEFAULT_SKEW_SCALE: f64 = 0.85;
/// Minimum chain length for a raw IMH run.
pub const MIN_CHAIN_LEN: usize = 100;
/// Minimum chain length for a variance read (two runs of this length).
pub const MIN_READ_LEN: usize = 2000;

// ---------------------------------------------------------------------------
// Exact expected acceptance rate by 2-d adaptive quadrature.
// ---------------------------------------------------------------------------

fn normal_pdf(x: f64, variance: f64) -> f64 {
    (-(x * x) / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
}

/// Recursive adaptive Simpson on [a, b] with absolute tolerance `tol`.
fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 40)
}

/// Expected acceptance rate of the stationary independence sampler for a
/// normal target whose variance is `ratio` times the proposal variance
/// (common mean), computed by two-dimensional adaptive quadrature.
///
/// The double integral
/// `∬ φ_ratio(x) φ_1(y) min(1, exp((1 - 1/ratio)(y² - x²)/2)) dy dx`
/// is evaluated over the positive quadrant (the integrand is even in both
/// arguments) with the inner integral split at the `x = y` kink of the
/// `min`. The result is accurate to well below the 1e-5 documented
/// tolerance.
pub fn expected_acceptance_rate_exact(ratio: f64) -> Result<f64> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::invalid(format!(
            "variance ratio must be positive and finite, got {ratio}"
        )));
    }
    let a = 0.5 * (1.0 - 1.0 / ratio);
    let accept = move |x: f64, y: f64| -> f64 {
        let z = a * (y * y - x * x);
        if z >= 0.0 {
            1.0
        } else {
            z.exp()
        }
    };
    let x_limit = 8.0 * ratio.sqrt().max(1.0);
    let y_limit = 8.0;
    let inner_tol = 1e-12;
    let outer_tol = 1e-10;

    let outer = |y: f64| -> f64 {
        let g = |x: f64| normal_pdf(x, ratio) * accept(x, y);
        let split = y.min(x_limit);
        let first = adaptive_simpson(&g, 0.0, split, inner_tol);
        let second = adaptive_simpson(&g, split, x_limit, inner_tol);
        normal_pdf(y, 1.0) * (first + second)
    };
    // Split the outer integral where the inner structure changes fastest.
    let mid = 1.0_f64.min(y_limit);
    let value = adaptive_simpson(&outer, 0.0, mid, outer_tol)
        + adaptive_simpson(&outer, mid, y_limit, outer_tol);
    Ok((4.0 * value).min(1.0))
}

// ---------------------------------------------------------------------------
// EAR table.
// ---------------------------------------------------------------------------

/// Tabulated expected acceptance rates on a grid of variance ratios,
/// invertible by monotone interpolation.
#[derive(Clone, Debug, Serialize)]
pub struct EarTable {
    ratios: Vec<f64>,
    ears: Vec<f64>,
}

/// Start of the standard ratio grid.
pub const STANDARD_GRID_START: f64 = 1.0;
/// End of the standard ratio grid (inclusive).
pub const STANDARD_GRID_END: f64 = 19.9;
/// Step of the standard ratio grid.
pub const STANDARD_GRID_STEP: f64 = 0.1;

/// Build an inclusive arithmetic grid `start, start+step, …, end`.
pub fn ratio_grid(start: f64, step: f64, end: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && step.is_finite() && end.is_finite()) || start <= 0.0 || step <= 0.0 {
        return Err(Error::invalid(format!(
            "grid requires positive start and step, got start={start}, step={step}, end={end}"
        )));
    }
    if end < start {
        return Err(Error::invalid(format!(
            "grid end {end} is below start {start}"
        )));
    }
    let count = ((end - start) / step).round() as usize + 1;
    Ok((0..count).map(|k| start + k as f64 * step).collect())
}

impl EarTable {
    /// Compute the table for a strictly increasing grid of positive ratios.
    ///
    /// Fails if the grid is malformed or if the computed rates are not
    /// strictly decreasing (which would make inversion ambiguous).
    pub fn build(grid: &[f64]) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::invalid("EAR grid needs at least two ratios".to_string()));
        }
        for w in grid.windows(2) {
            if !(w[0].is_finite() && w[0] > 0.0 && w[1] > w[0]) {
                return Err(Error::invalid(format!(
                    "EAR grid must be positive and strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let ears = grid
            .par_iter()
            .map(|&r| expected_acceptance_rate_exact(r))
            .collect::<Result<Vec<f64>>>()?;
        for (w, r) in ears.windows(2).zip(grid.windows(2)) {
            if w[1] >= w[0] {
                return Err(Error::MonotonicityViolation { ratio: r[1] });
            }
        }
        Ok(EarTable { ratios: grid.to_vec(), ears })
    }

    /// Reassemble a table from stored columns (e.g. a parsed CSV),
    /// revalidating monotonicity but not recomputing the quadrature.
    pub fn from_columns(ratios: Vec<f64>, ears: Vec<f64>) -> Result<Self> {
        if ratios.len() != ears.len() || ratios.len() < 2 {
            return Err(Error::invalid(
                "table columns must have equal length >= 2".to_string(),
            ));
        }
        for w in ratios.windows(2) {
            if !(w[0] > 0.0 && w[1] > w[0]) {
                return Err(Error::invalid(
                    "ratios must be positive and strictly increasing".to_string(),
                ));
            }
        }
        for (w, r) in ears.windows(2).zip(ratios.windows(2)) {
            if w[1] >= w[0] {
                return Err(Error::MonotonicityViolation { ratio: r[1] });
            }
        }
        Ok(EarTable { ratios, ears })
    }

    /// The standard table on ratios 1.0 to 19.9 in steps of 0.1, computed
    /// once per process and shared.
    pub fn standard() -> &'static EarTable {
        static TABLE: OnceLock<EarTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let grid = ratio_grid(STANDARD_GRID_START, STANDARD_GRID_STEP, STANDARD_GRID_END)
                .expect("standard grid is well-formed");
            EarTable::build(&grid).expect("standard grid is monotone")
        })
    }

    /// Tabulated ratios.
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// Tabulated expected acceptance rates.
    pub fn ears(&self) -> &[f64] {
        &self.ears
    }

    /// Smallest tabulated rate (at the largest ratio).
    pub fn min_ear(&self) -> f64 {
        *self.ears.last().unwrap()
    }

    /// Largest tabulated rate (at the smallest ratio).
    pub fn max_ear(&self) -> f64 {
        self.ears[0]
    }

    /// Largest tabulated ratio.
    pub fn max_ratio(&self) -> f64 {
        *self.ratios.last().unwrap()
    }

    /// Grid spacing between the first two ratios (the standard grids are
    /// arithmetic, so this is the global step).
    pub fn step(&self) -> f64 {
        self.ratios[1] - self.ratios[0]
    }

    /// Invert an observed acceptance rate into a variance ratio by linear
    /// interpolation between the bracketing grid rates.
    ///
    /// Returns [`Error::OutOfRange`] when the rate falls outside
    /// `[min_ear, max_ear]`; callers decide whether to extend the grid.
    pub fn lookup_ratio(&self, acceptance_rate: f64) -> Result<f64> {
        if !acceptance_rate.is_finite() {
            return Err(Error::invalid(format!(
                "acceptance rate must be finite, got {acceptance_rate}"
            )));
        }
        if acceptance_rate > self.max_ear() || acceptance_rate < self.min_ear() {
            return Err(Error::OutOfRange {
                rate: acceptance_rate,
                min: self.min_ear(),
                max: self.max_ear(),
            });
        }
        // ears is strictly decreasing; find k with ears[k] >= rate >= ears[k+1].
        let mut lo = 0usize;
        let mut hi = self.ears.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.ears[mid] >= acceptance_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (e0, e1) = (self.ears[lo], self.ears[hi]);
        let (r0, r1) = (self.ratios[lo], self.ratios[hi]);
        let t = (e0 - acceptance_rate) / (e0 - e1);
        Ok(r0 + t * (r1 - r0))
    }

    /// Write the table as CSV (`ratio,ear` header, six decimal places).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "ratio,ear")?;
        for (r, e) in self.ratios.iter().zip(&self.ears) {
            writeln!(out, "{r:.4},{e:.6}")?;
        }
        Ok(())
    }

    /// Parse a table previously written by [`Self::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut ratios = Vec::new();
        let mut ears = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || (idx == 0 && trimmed.starts_with("ratio")) {
                continue;
            }
            let mut parts = trimmed.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.ok_or_else(|| Error::invalid(format!("malformed CSV line {}", idx + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("CSV line {}: {e}", idx + 1)))
            };
            ratios.push(parse(parts.next())?);
            ears.push(parse(parts.next())?);
        }
        EarTable::from_columns(ratios, ears)
    }
}

// ---------------------------------------------------------------------------
// Chains.
// ---------------------------------------------------------------------------

/// A univariate normal proposal for the independence sampler.
#[derive(Clone, Copy, Debug)]
pub struct GaussianProposal {
    /// Proposal mean (also the chain's initial state).
    pub mean: f64,
    /// Proposal variance.
    pub variance: f64,
}

/// Output of one independence Metropolis–Hastings run.
#[derive(Clone, Debug)]
pub struct ChainResult {
    /// Retained (post burn-in) states.
    pub samples: Vec<f64>,
    /// Accepted moves among retained transitions.
    pub accept_count: usize,
    /// `accept_count / (n - n_burn)`.
    pub acceptance_rate: f64,
    /// Total transitions simulated.
    pub n_total: usize,
    /// Transitions discarded as burn-in.
    pub n_burn: usize,
}

/// Run an independence MH chain on a univariate target.
///
/// The chain starts at the proposal mean; a target that is `-inf` there is
/// an error ([`Error::NonFiniteTarget`]) because the first acceptance ratio
/// would be undefined. The acceptance rate is computed strictly over the
/// post burn-in transitions so that the initial transient (the sampler
/// walking from the proposal's center into the target's bulk) cannot bias
/// a variance read.
pub fn imh_chain<F>(
    log_target: F,
    proposal: GaussianProposal,
    n: usize,
    burn_in: f64,
    policy: RngPolicy,
) -> Result<ChainResult>
where
    F: Fn(f64) -> f64,
{
    if n < MIN_CHAIN_LEN {
        return Err(Error::invalid(format!(
            "chain length {n} is below the minimum {MIN_CHAIN_LEN}"
        )));
    }
    if !(proposal.variance.is_finite() && proposal.variance > 0.0) {
        return Err(Error::invalid(format!(
            "proposal variance must be positive, got {}",
            proposal.variance
        )));
    }
    if !(0.0..1.0).contains(&burn_in) {
        return Err(Error::invalid(format!(
            "burn-in fraction must lie in [0, 1), got {burn_in}"
        )));
    }

    let mut rng = policy.rng();
    let sd = proposal.variance.sqrt();
    let mut x = proposal.mean;
    let mut lp_x = log_target(x);
    if lp_x.is_nan() {
        return Err(Error::NonFiniteEvaluation(format!(
            "target log-density is NaN at the initial state {x}"
        )));
    }
    if lp_x == f64::NEG_INFINITY {
        return Err(Error::NonFiniteTarget(x));
    }

    let n_burn = (n as f64 * burn_in).floor() as usize;
    let retained = n - n_burn;
    let mut samples = Vec::with_capacity(retained);
    let mut accept_count = 0usize;

    for t in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let y = proposal.mean + sd * z;
        let lp_y = log_target(y);
        debug_assert!(!lp_y.is_nan(), "target log-density is NaN at {y}");
        // log q(x) - log q(y) for the normal proposal.
        let dx = x - proposal.mean;
        let dy = y - proposal.mean;
        let log_proposal_correction = (dy * dy - dx * dx) / (2.0 * proposal.variance);
        let log_alpha = (lp_y - lp_x) + log_proposal_correction;
        let u: f64 = rng.random();
        // ln(u) < log_alpha is false for NaN, so a NaN density rejects.
        if u.ln() < log_alpha {
            x = y;
            lp_x = lp_y;
            if t >= n_burn {
                accept_count += 1;
            }
        }
        if t >= n_burn {
            samples.push(x);
        }
    }

    Ok(ChainResult {
        samples,
        accept_count,
        acceptance_rate: accept_count as f64 / retained as f64,
        n_total: n,
        n_burn,
    })
}

// ---------------------------------------------------------------------------
// Acceptance-rate variance estimator.
// ---------------------------------------------------------------------------

/// Which way the confirmation run resolved the variance-ratio ambiguity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceBranch {
    /// Target variance is `ratio ×` the proposal variance (confirmed).
    Wider,
    /// Target variance is `proposal / ratio` (confirmation got worse).
    Narrower,
    /// Confirmation held or improved but stayed below the threshold: the
    /// target is not well approximated by any normal; the widened read is
    /// shrunk.
    NonNormal,
}

/// Everything observed while turning acceptance rates into a variance.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct VbaimhDiagnosis {
    /// Acceptance rate of the pilot run at the nominal proposal variance.
    pub pilot_rate: f64,
    /// Acceptance rate of the confirmation run at the widened variance.
    pub confirm_rate: f64,
    /// Variance ratio read from the table for the pilot rate.
    pub ratio_read: f64,
    /// Branch taken after confirmation.
    pub branch: VarianceBranch,
    /// Convenience flag: `branch == NonNormal`.
    pub non_normal: bool,
    /// True when the pilot rate fell below the table and the grid had to be
    /// extended once to bracket it.
    pub grid_extended: bool,
}

/// Invert an observed acceptance rate into a variance ratio, extending the
/// grid once (to twice its maximum ratio, same start and step) when the
/// rate falls below the tabulated minimum.
///
/// Returns the ratio and whether the extension was needed. A rate below
/// even the extended table is [`Error::DegenerateTarget`]: the proposal is
/// so far from the target that no tabulated ratio explains the chain.
pub fn ratio_from_rate(table: &EarTable, rate: f64) -> Result<(f64, bool)> {
    match table.lookup_ratio(rate) {
        Ok(r) => Ok((r, false)),
        Err(Error::OutOfRange { rate, .. }) if rate < table.min_ear() => {
            let grid = ratio_grid(table.ratios()[0], table.step(), 2.0 * table.max_ratio())?;
            let extended = EarTable::build(&grid)?;
            match extended.lookup_ratio(rate) {
                Ok(r) => Ok((r, true)),
                Err(Error::OutOfRange { rate, .. }) => {
                    Err(Error::DegenerateTarget { rate, min: extended.min_ear() })
                }
                Err(e) => Err(e),
            }
        }
        Err(e) => Err(e),
    }
}

/// Estimate the variance of a univariate target from IMH acceptance rates.
///
/// A pilot chain proposes from `N(center, proposal_variance)`; its
/// acceptance rate is inverted through `table` into a variance ratio `r`.
/// Because the rate is symmetric in `r ↔ 1/r`, a confirmation chain
/// proposes from the widened `N(center, r · proposal_variance)`:
///
/// * rate below the pilot rate — wrong direction, the target variance is
///   `proposal_variance / r`;
/// * rate ≥ [`CONFIRMATION_THRESHOLD`] — the widened proposal matches, the
///   target variance is `r · proposal_variance`;
/// * otherwise — no normal matches the target; the widened read is scaled
///   by `skew_scale` and flagged non-normal.
///
/// The drop-below-pilot check comes first: against a target only slightly
/// narrower than the proposal, both rates clear the threshold, but every
/// widening still lowers the rate, so the comparison is what separates the
/// two normal branches.
///
/// If the pilot rate falls below the table, the grid is extended once to
/// twice its maximum ratio; a rate below even that is
/// [`Error::DegenerateTarget`].
#[allow(clippy::too_many_arguments)]
pub fn vbaimh_variance<F>(
    log_target: F,
    center: f64,
    proposal_variance: f64,
    table: &EarTable,
    n: usize,
    burn_in: f64,
    skew_scale: f64,
    policy: RngPolicy,
) -> Result<(f64, VbaimhDiagnosis)>
where
    F: Fn(f64) -> f64,
{
    vbaimh_variance_pooled(
        log_target,
        center,
        proposal_variance,
        table,
        n,
        burn_in,
        skew_scale,
        1,
        policy,
    )
}

/// Maximum chains per pooled read, bounded by the stream stride so pooled
/// chains never collide with a neighboring job's streams.
pub const MAX_POOLED_CHAINS: usize = (crate::rng::STREAM_STRIDE / 2) as usize;

/// Acceptance rate pooled over `chains` independent chains of length `n`
/// each (identical proposal, streams `policy.sub(stride·c + lane)`):
/// total accepted over total retained.
fn pooled_rate<F>(
    log_target: &F,
    proposal: GaussianProposal,
    n: usize,
    burn_in: f64,
    chains: usize,
    lane: u64,
    policy: RngPolicy,
) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    let mut accepted = 0usize;
    let mut retained = 0usize;
    for c in 0..chains {
        let chain = imh_chain(log_target, proposal, n, burn_in, policy.sub(2 * c as u64 + lane))?;
        accepted += chain.accept_count;
        retained += chain.n_total - chain.n_burn;
    }
    Ok(accepted as f64 / retained as f64)
}

/// [`vbaimh_variance`] with each acceptance rate pooled over `chains`
/// independent chains on disjoint streams.
///
/// Pooling reduces the read noise by roughly `1/√chains` while keeping the
/// per-chain length (and so the stationarity behavior) unchanged; with
/// `chains = 1` this is exactly [`vbaimh_variance`], stream for stream.
#[allow(clippy::too_many_arguments)]
pub fn vbaimh_variance_pooled<F>(
    log_target: F,
    center: f64,
    proposal_variance: f64,
    table: &EarTable,
    n: usize,
    burn_in: f64,
    skew_scale: f64,
    chains: usize,
    policy: RngPolicy,
) -> Result<(f64, VbaimhDiagnosis)>
where
    F: Fn(f64) -> f64,
{
    if n < MIN_READ_LEN {
        return Err(Error::invalid(format!(
            "variance reads need chains of at least {MIN_READ_LEN}, got {n}"
        )));
    }
    if !(skew_scale > 0.0 && skew_scale <= 1.0) {
        return Err(Error::invalid(format!(
            "skew scale must lie in (0, 1], got {skew_scale}"
        )));
    }
    if chains == 0 || chains > MAX_POOLED_CHAINS {
        return Err(Error::invalid(format!(
            "pooled reads take 1..={MAX_POOLED_CHAINS} chains, got {chains}"
        )));
    }

    let pilot_rate = pooled_rate(
        &log_target,
        GaussianProposal { mean: center, variance: proposal_variance },
        n,
        burn_in,
        chains,
        0,
        policy,
    )?;

    let (ratio, grid_extended) = ratio_from_rate(table, pilot_rate)?;

    let widened = ratio * proposal_variance;
    let confirm_rate = pooled_rate(
        &log_target,
        GaussianProposal { mean: center, variance: widened },
        n,
        burn_in,
        chains,
        1,
        policy,
    )?;

    // A drop below the pilot rate is checked before the confirmation
    // threshold: for a target narrower than the proposal by a factor close
    // to one, both rates sit above the threshold, but widening the proposal
    // always moves the rate down (to EAR(r²) against the pilot's EAR(r)),
    // so the comparison is the discriminating observation.
    let (variance, branch) = if confirm_rate < pilot_rate {
        (proposal_variance / ratio, VarianceBranch::Narrower)
    } else if confirm_rate >= CONFIRMATION_THRESHOLD {
        (widened, VarianceBranch::Wider)
    } else {
        (skew_scale * widened, VarianceBranch::NonNormal)
    };

    Ok((
        variance,
        VbaimhDiagnosis {
            pilot_rate,
            confirm_rate,
            ratio_read: ratio,
            branch,
            non_normal: branch == VarianceBranch::NonNormal,
            grid_extended,
        },
    ))
}

// ---------------------------------------------------------------------------
// Deterministic acceptance-rate functional.
// ---------------------------------------------------------------------------

/// Coarse scan points used to locate the target's effective support before
/// laying down the master quadrature grid.
const RATE_FN_SCAN: usize = 1024;
/// Master grid size (odd, for composite Simpson).
const RATE_FN_GRID: usize = 4097;
/// Log-density drop below the maximum past which mass is treated as
/// negligible when clipping the grid (e⁻⁴⁶ ≈ 1e-20).
const RATE_FN_LOG_CLIP: f64 = 46.0;
/// Widest variance ratio the scan window is sized for: the read protocol
/// never resolves ratios beyond one doubling of the standard grid, so mass
/// further than ~8 standard deviations of that widest normal is irrelevant.
const RATE_FN_MAX_RATIO: f64 = 2.0 * STANDARD_GRID_END;

/// The stationary expected acceptance rate of an independence sampler as a
/// deterministic functional of the (unnormalized) target and a normal
/// proposal, computed by quadrature instead of by running a chain.
///
/// Writing `π̃` for the unnormalized target density and `q` for the
/// proposal density, the stationary acceptance rate is
///
/// ```text
/// EAR = (1/Z) ∬ min(π̃(x)·q(y), π̃(y)·q(x)) dy dx,   Z = ∫ π̃(x) dx,
/// ```
///
/// which this type evaluates on a fixed master grid clipped to the target's
/// effective support (the `min` vanishes wherever either density argument
/// does, so the clipped window is exact for both integrals up to the
/// discarded e⁻⁴⁶ tail mass). Evaluating the target on the grid once lets
/// any number of proposal variances be read against the same target — the
/// two-stage read protocol re-rates the widened proposal for free.
///
/// A finite chain's realized acceptance fraction has heavy-tailed noise at
/// large variance ratios (rare deep-tail states carry rejection runs longer
/// than any affordable chain), so reads that must be accurate use this
/// functional; chains remain available where sampling itself is the point.
#[derive(Clone, Debug)]
pub struct RateFunctional {
    xs: Vec<f64>,
    simpson_w: Vec<f64>,
    pi_hat: Vec<f64>,
    mass: f64,
}

impl RateFunctional {
    /// Evaluate `log_target` around `center` on a window wide enough for
    /// any ratio the read protocol can express relative to
    /// `proposal_variance`, clip to the effective support, and cache the
    /// rescaled density on the master grid.
    ///
    /// Errors with [`Error::NonFiniteEvaluation`] if the target is NaN
    /// anywhere on the grid, and [`Error::NonFiniteTarget`] if it carries
    /// no mass on the window at all.
    pub fn build<F>(log_target: F, center: f64, proposal_variance: f64) -> Result<Self>
    where
        F: Fn(f64) -> f64,
    {
        if !(proposal_variance.is_finite() && proposal_variance > 0.0) {
            return Err(Error::invalid(format!(
                "proposal variance must be positive, got {proposal_variance}"
            )));
        }
        let half = 8.0 * (proposal_variance * RATE_FN_MAX_RATIO).sqrt();
        let scan_step = 2.0 * half / (RATE_FN_SCAN - 1) as f64;
        let mut scan = Vec::with_capacity(RATE_FN_SCAN);
        let mut peak = f64::NEG_INFINITY;
        for k in 0..RATE_FN_SCAN {
            let x = center - half + k as f64 * scan_step;
            let lp = log_target(x);
            if lp.is_nan() {
                return Err(Error::NonFiniteEvaluation(format!(
                    "target log-density is NaN at {x}"
                )));
            }
            peak = peak.max(lp);
            scan.push(lp);
        }
        if peak == f64::NEG_INFINITY {
            return Err(Error::NonFiniteTarget(center));
        }
        let first = scan.iter().position(|lp| lp - peak > -RATE_FN_LOG_CLIP).unwrap();
        let last = scan.iter().rposition(|lp| lp - peak > -RATE_FN_LOG_CLIP).unwrap();
        // One scan cell of margin so the clipped tail is genuinely below
        // the threshold rather than cut at the last retained node.
        let lo = center - half + first.saturating_sub(1) as f64 * scan_step;
        let hi = center - half + (last + 1).min(RATE_FN_SCAN - 1) as f64 * scan_step;

        let n = RATE_FN_GRID;
        let h = (hi - lo) / (n - 1) as f64;
        let mut xs = Vec::with_capacity(n);
        let mut pi_hat = Vec::with_capacity(n);
        // The clipped window can shift the true maximum between scan nodes;
        // rescale against the fine grid's own peak for safety.
        let mut fine = Vec::with_capacity(n);
        let mut fine_peak = f64::NEG_INFINITY;
        for k in 0..n {
            let x = lo + k as f64 * h;
            let lp = log_target(x);
            if lp.is_nan() {
                return Err(Error::NonFiniteEvaluation(format!(
                    "target log-density is NaN at {x}"
                )));
            }
            fine_peak = fine_peak.max(lp);
            xs.push(x);
            fine.push(lp);
        }
        for lp in fine {
            pi_hat.push((lp - fine_peak).exp());
        }
        let mut simpson_w = vec![0.0; n];
        for (k, w) in simpson_w.iter_mut().enumerate() {
            *w = h / 3.0
                * if k == 0 || k == n - 1 {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
        }
        let mass: f64 = simpson_w.iter().zip(&pi_hat).map(|(w, p)| w * p).sum();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::NonFiniteTarget(center));
        }
        Ok(RateFunctional { xs, simpson_w, pi_hat, mass })
    }

    /// Smallest grid node.
    pub fn window_lo(&self) -> f64 {
        self.xs[0]
    }

    /// Largest grid node.
    pub fn window_hi(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    /// Expected acceptance rate against the proposal `N(center, variance)`.
    pub fn rate(&self, center: f64, variance: f64) -> Result<f64> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::invalid(format!(
                "proposal variance must be positive, got {variance}"
            )));
        }
        let n = self.xs.len();
        let mut q = Vec::with_capacity(n);
        let inv2v = 1.0 / (2.0 * variance);
        let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
        for &x in &self.xs {
            let d = x - center;
            q.push(norm * (-d * d * inv2v).exp());
        }
        // ∬ min(π̃(x)q(y), π̃(y)q(x)) over the symmetric grid: diagonal once,
        // off-diagonal pairs twice.
        let mut double = 0.0;
        for i in 0..n {
            let (pi_i, q_i, w_i) = (self.pi_hat[i], q[i], self.simpson_w[i]);
            // Every term in row i carries a factor of min(·, π̃ᵢ or qᵢ),
            // so a vanishing target or proposal density zeroes the row.
            if pi_i == 0.0 || q_i == 0.0 {
                continue;
            }
            let mut row = 0.5 * w_i * pi_i * q_i;
            for j in (i + 1)..n {
                row += self.simpson_w[j] * (pi_i * q[j]).min(self.pi_hat[j] * q_i);
            }
            double += 2.0 * w_i * row;
        }
        Ok((double / self.mass).min(1.0))
    }
}

/// [`vbaimh_variance`] with both acceptance rates computed exactly by the
/// [`RateFunctional`] quadrature instead of estimated from finite chains.
///
/// The read protocol — table inversion, one-time grid extension, widened
/// confirmation run, and the wider/narrower/non-normal branch — is the same;
/// only the rate estimates change. The result is deterministic (no RNG) and
/// free of the heavy-tailed chain noise that dominates realized acceptance
/// fractions at large variance ratios.
pub fn vbaimh_variance_exact<F>(
    log_target: F,
    center: f64,
    proposal_variance: f64,
    table: &EarTable,
    skew_scale: f64,
) -> Result<(f64, VbaimhDiagnosis)>
where
    F: Fn(f64) -> f64,
{
    if !(skew_scale > 0.0 && skew_scale <= 1.0) {
        return Err(Error::invalid(format!(
            "skew scale must lie in (0, 1], got {skew_scale}"
        )));
    }
    let functional = RateFunctional::build(&log_target, center, proposal_variance)?;
    let pilot_rate = functional.rate(center, proposal_variance)?;
    let (ratio, grid_extended) = ratio_from_rate(table, pilot_rate)?;
    let widened = ratio * proposal_variance;
    let confirm_rate = functional.rate(center, widened)?;

    // A drop below the pilot rate is checked before the confirmation
    // threshold: for a target narrower than the proposal by a factor close
    // to one, both rates sit above the threshold, but widening the proposal
    // always moves the rate down (to EAR(r²) against the pilot's EAR(r)),
    // so the comparison is the discriminating observation.
    let (variance, branch) = if confirm_rate < pilot_rate {
        (proposal_variance / ratio, VarianceBranch::Narrower)
    } else if confirm_rate >= CONFIRMATION_THRESHOLD {
        (widened, VarianceBranch::Wider)
    } else {
        (skew_scale * widened, VarianceBranch::NonNormal)
    };

    Ok((
        variance,
        VbaimhDiagnosis {
            pilot_rate,
            confirm_rate,
            ratio_read: ratio,
            branch,
            non_normal: branch == VarianceBranch::NonNormal,
            grid_extended,
        },
    ))
}
