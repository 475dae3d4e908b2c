//! Central finite differences for gradients and Hessians.
//!
//! Step sizes scale with the magnitude of each coordinate,
//! `h_i = step * max(1, |x_i|)`, which keeps relative truncation and
//! roundoff error balanced for coordinates of any scale.

use nalgebra::DMatrix;

use crate::error::Error;
use crate::Result;

/// Default relative step for first derivatives.
pub const DEFAULT_GRADIENT_STEP: f64 = 1e-5;
/// Default relative step for second derivatives.
pub const DEFAULT_HESSIAN_STEP: f64 = 1e-5;

fn coordinate_step(x: f64, step: f64) -> f64 {
    step * x.abs().max(1.0)
}

/// Central-difference gradient of `f` at `x`.
///
/// Returns [`Error::NonFiniteEvaluation`] if any probe produces NaN or an
/// infinity; differencing across a support boundary has no meaning.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = coordinate_step(x[i], step);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation(format!(
                "gradient probe at coordinate {i} (x = {}, h = {h}) gave ({fp}, {fm})",
                x[i]
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Central-difference Hessian of `f` at `x`, symmetrized as `(H + Hᵀ)/2`.
///
/// Diagonal entries use the three-point second difference; off-diagonal
/// entries use the four-corner stencil. Any non-finite probe is an error.
pub fn finite_diff_hessian<F>(f: F, x: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let p = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFiniteEvaluation(format!(
            "Hessian center evaluation gave {f0}"
        )));
    }
    let h: Vec<f64> = x.iter().map(|&xi| coordinate_step(xi, step)).collect();
    let mut hess = DMatrix::zeros(p, p);
    let mut probe = x.to_vec();

    for i in 0..p {
        probe[i] = x[i] + h[i];
        let fp = f(&probe);
        probe[i] = x[i] - h[i];
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation(format!(
                "Hessian diagonal probe at coordinate {i} gave ({fp}, {fm})"
            )));
        }
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
    }

    for i in 0..p {
        for j in (i + 1)..p {
            let mut corner = |si: f64, sj: f64| {
                probe[i] = x[i] + si * h[i];
                probe[j] = x[j] + sj * h[j];
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let (pp, pm, mp, mm) = (
                corner(1.0, 1.0),
                corner(1.0, -1.0),
                corner(-1.0, 1.0),
                corner(-1.0, -1.0),
            );
            if ![pp, pm, mp, mm].iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteEvaluation(format!(
                    "Hessian corner probe at ({i}, {j}) gave ({pp}, {pm}, {mp}, {mm})"
                )));
            }
            let value = (pp - pm - mp + mm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = value;
            hess[(j, i)] = value;
        }
    }

    // The four-corner stencil is symmetric by construction, but averaging
    // guards against future stencil changes and costs nothing.
    let sym = (&hess + hess.transpose()) * 0.5;
    Ok(sym)
}
