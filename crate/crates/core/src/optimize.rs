//! Quasi-Newton (BFGS) minimizer with numerical gradients.
//!
//! The objectives in this crate are smooth almost everywhere but have no
//! cheap analytic gradients (they involve log-densities of arbitrary
//! models), so the minimizer differentiates numerically and relies on a
//! backtracking line search for robustness.
//!
//! Contract: the objective must return a finite value or `+inf` everywhere;
//! callers that wrap log-densities floor `-inf` tails to a large finite
//! penalty so that gradient probes near a support boundary stay finite.

use nalgebra::{DMatrix, DVector};

use crate::numdiff::{finite_diff_gradient, DEFAULT_GRADIENT_STEP};

/// Tuning knobs for [`minimize`].
#[derive(Clone, Copy, Debug)]
pub struct Options {
    /// Stop when the gradient sup-norm falls below this.
    pub grad_tol: f64,
    /// Hard cap on iterations.
    pub max_iters: usize,
    /// Relative step for finite-difference gradients.
    pub gradient_step: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            grad_tol: 1e-6,
            max_iters: 500,
            gradient_step: DEFAULT_GRADIENT_STEP,
        }
    }
}

/// Why the minimizer stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Gradient sup-norm reached `grad_tol`.
    GradientTolerance,
    /// No descent step improved the objective; the iterate is as good as
    /// the line search can make it (often a boundary or roundoff floor).
    StepStall,
    /// Iteration budget exhausted.
    MaxIterations,
    /// The objective was not finite at the starting point.
    NonFiniteStart,
}

/// Result of a minimization run.
#[derive(Clone, Debug)]
pub struct Outcome {
    /// Best point found.
    pub x: Vec<f64>,
    /// Objective value at `x`.
    pub value: f64,
    /// Gradient sup-norm at `x`.
    pub grad_sup_norm: f64,
    /// Iterations performed.
    pub iterations: usize,
    /// Stopping reason.
    pub termination: Termination,
}

impl Outcome {
    /// True when the stopping reason indicates a usable stationary point.
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::GradientTolerance)
    }
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Minimize `f` from `x0` with BFGS and a backtracking Armijo line search.
pub fn minimize<F>(f: F, x0: &[f64], opts: &Options) -> Outcome
where
    F: Fn(&[f64]) -> f64,
{
    const ARMIJO_C1: f64 = 1e-4;
    const BACKTRACK: f64 = 0.5;
    const MAX_BACKTRACKS: usize = 50;

    let p = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut fx = f(x.as_slice());
    if !fx.is_finite() {
        return Outcome {
            x: x0.to_vec(),
            value: fx,
            grad_sup_norm: f64::INFINITY,
            iterations: 0,
            termination: Termination::NonFiniteStart,
        };
    }

    let grad_at = |x: &DVector<f64>| -> Option<DVector<f64>> {
        finite_diff_gradient(&f, x.as_slice(), opts.gradient_step)
            .ok()
            .map(DVector::from_vec)
    };

    let mut grad = match grad_at(&x) {
        Some(g) => g,
        None => {
            return Outcome {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_sup_norm: f64::INFINITY,
                iterations: 0,
                termination: Termination::StepStall,
            }
        }
    };

    let mut inv_hess = DMatrix::<f64>::identity(p, p);
    let mut first_update_done = false;

    for iter in 0..opts.max_iters {
        let gnorm = sup_norm(&grad);
        if gnorm <= opts.grad_tol {
            return Outcome {
                x: x.as_slice().to_vec(),
                value: fx,
                grad_sup_norm: gnorm,
                iterations: iter,
                termination: Termination::GradientTolerance,
            };
        }

        let mut direction = -(&inv_hess * &grad);
        if direction.dot(&grad) >= 0.0 {
            // Curvature information went stale; restart from steepest descent.
            inv_hess = DMatrix::identity(p, p);
            first_update_done = false;
            direction = -grad.clone();
        }

        // Backtracking line search.
        let slope = direction.dot(&grad);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = &x + &direction * t;
            let fc = f(cand.as_slice());
            if fc.is_finite() && fc <= fx + ARMIJO_C1 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= BACKTRACK;
        }
        let (x_new, f_new) = match accepted {
            Some(pair) => pair,
            None => {
                return Outcome {
                    x: x.as_slice().to_vec(),
                    value: fx,
                    grad_sup_norm: gnorm,
                    iterations: iter,
                    termination: Termination::StepStall,
                }
            }
        };

        let grad_new = match grad_at(&x_new) {
            Some(g) => g,
            None => {
                return Outcome {
                    x: x_new.as_slice().to_vec(),
                    value: f_new,
                    grad_sup_norm: f64::INFINITY,
                    iterations: iter + 1,
                    termination: Termination::StepStall,
                }
            }
        };

        let s = &x_new - &x;
        let y = &grad_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if !first_update_done {
                // Scale the initial inverse Hessian to the observed
                // curvature before the first update; this dramatically
                // improves conditioning on badly scaled problems.
                inv_hess = DMatrix::identity(p, p) * (sy / y.dot(&y));
                first_update_done = true;
            }
            let rho = 1.0 / sy;
            let hy = &inv_hess * &y;
            let yhy = y.dot(&hy);
            // BFGS inverse update, expanded to avoid building (I - ρsyᵀ).
            inv_hess = &inv_hess - (&hy * s.transpose() + &s * hy.transpose()) * rho
                + &s * s.transpose() * (rho * rho * yhy + rho);
        }

        x = x_new;
        fx = f_new;
        grad = grad_new;
    }

    Outcome {
        grad_sup_norm: sup_norm(&grad),
        x: x.as_slice().to_vec(),
        value: fx,
        iterations: opts.max_iters,
        termination: Termination::MaxIterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solves_quadratic_exactly() {
        // min (x-3)² + 2(y+1)²
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
        let out = minimize(f, &[0.0, 0.0], &Options::default());
        assert!(out.converged());
        assert_relative_eq!(out.x[0], 3.0, epsilon = 1e-5);
        assert_relative_eq!(out.x[1], -1.0, epsilon = 1e-5);
    }

    #[test]
    fn solves_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let out = minimize(
            f,
            &[-1.2, 1.0],
            &Options {
                max_iters: 2000,
                ..Options::default()
            },
        );
        assert!(out.converged(), "termination: {:?}", out.termination);
        assert_relative_eq!(out.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(out.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn respects_floored_infeasible_region() {
        // Minimum of the unconstrained quadratic sits at x = -2, outside the
        // floored feasible region x > 0; the optimizer must stay inside and
        // stall near the boundary instead of diverging.
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                1e10
            } else {
                (x[0] + 2.0).powi(2) - x[0].ln() * 1e-3
            }
        };
        let out = minimize(f, &[1.0], &Options::default());
        assert!(out.x[0] > 0.0);
        assert!(out.value.is_finite());
    }

    #[test]
    fn non_finite_start_is_reported() {
        let f = |_: &[f64]| f64::INFINITY;
        let out = minimize(f, &[0.0], &Options::default());
        assert_eq!(out.termination, Termination::NonFiniteStart);
    }

    #[test]
    fn badly_scaled_quadratic_converges() {
        let f = |x: &[f64]| 1e6 * x[0] * x[0] + 1e-4 * (x[1] - 5.0).powi(2);
        let out = minimize(
            f,
            &[1.0, 0.0],
            &Options {
                max_iters: 3000,
                grad_tol: 1e-8,
                ..Options::default()
            },
        );
        assert_relative_eq!(out.x[0], 0.0, epsilon = 1e-5);
        assert_relative_eq!(out.x[1], 5.0, epsilon = 1e-2);
    }
}
