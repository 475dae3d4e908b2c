//! The target distribution interface.
//!
//! A [`TargetModel`] wraps an unnormalized log-density over a fixed-length
//! coordinate vector. The normalizing constant is never needed: chains use
//! density ratios and the correction methods use derivatives. Models may
//! attach an analytic Hessian; otherwise a finite-difference Hessian is
//! used.
//!
//! Contract for the log-density: it must return a finite value inside the
//! support and `-inf` outside; `NaN` is a programming error (checked in
//! debug builds).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::numdiff::{finite_diff_hessian, DEFAULT_HESSIAN_STEP};
use crate::Result;

type LogDensityFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type HessianFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// An unnormalized target distribution on `R^dim`.
#[derive(Clone)]
pub struct TargetModel {
    name: String,
    dim: usize,
    log_density: Arc<LogDensityFn>,
    hessian: Option<Arc<HessianFn>>,
}

impl fmt::Debug for TargetModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TargetModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("analytic_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl TargetModel {
    /// Wrap a log-density function.
    pub fn new<F>(name: impl Into<String>, dim: usize, log_density: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        TargetModel {
            name: name.into(),
            dim,
            log_density: Arc::new(log_density),
            hessian: None,
        }
    }

    /// Attach an analytic Hessian of the log-density.
    pub fn with_hessian<H>(mut self, hessian: H) -> Self
    where
        H: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    /// Model name, used in reports.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Coordinate dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Whether an analytic Hessian is attached.
    pub fn has_analytic_hessian(&self) -> bool {
        self.hessian.is_some()
    }

    /// Unnormalized log-density at `theta` (`-inf` outside the support).
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        debug_assert_eq!(theta.len(), self.dim, "dimension mismatch");
        let value = (self.log_density)(theta);
        debug_assert!(!value.is_nan(), "log-density returned NaN at {theta:?}");
        value
    }

    /// Hessian of the log-density at `theta`: analytic when attached,
    /// otherwise central finite differences with coordinate-scaled steps.
    pub fn hessian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        match &self.hessian {
            Some(h) => Ok(h(theta)),
            None => finite_diff_hessian(
                |x| (self.log_density)(x),
                theta,
                DEFAULT_HESSIAN_STEP,
            ),
        }
    }
}
