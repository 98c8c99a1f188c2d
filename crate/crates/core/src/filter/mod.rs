//! Filters: the residual-aware DR-EKF with its MSE certificate, and the
//! baseline EKF.
//!
//! Both split a stage into `update(y_t)` (consume the measurement) and
//! `predict(u_t)` (propagate to the next prior), so a controller can pick
//! `u_t` from the posterior in between. `step` does both.


use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::psd::{GaussianLaw, PsdMatrix};

mod audit;
mod drekf;
mod ekf;

pub use audit::{certificate_audit, AuditStage, CertificateAudit, StageErrors};
pub use drekf::{drekf_init, MAX_RADIUS_RATIO, CertificateState, DrEkf, DrEkfConfig, EnvelopeMode, EnvelopeSequences, StageRecord};
pub use ekf::{Ekf, EKF_INNOVATION_REGULARIZATION};

/// Gaussian noise model used by a filter: initial state, process and
/// measurement noise. Time-invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub x0: GaussianLaw,
    pub w: GaussianLaw,
    pub v: GaussianLaw,
}

/// Means and covariance after a stage's measurement update.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    pub stage: usize,
    pub prior_mean: DVector<f64>,
    pub prior_cov: PsdMatrix,
    pub posterior_mean: DVector<f64>,
    pub posterior_cov: PsdMatrix,
}

/// Common interface the simulation engine drives.
pub trait Estimator {
    /// Consume `y_t` for the current stage.
    fn update(&mut self, y: &DVector<f64>) -> Result<&FilterState>;
    /// Propagate the posterior through `u_t` to the next stage's prior.
    fn predict(&mut self, u: &DVector<f64>) -> Result<()>;

    fn step(&mut self, y: &DVector<f64>, u: &DVector<f64>) -> Result<FilterState> {
        let state = self.update(y)?.clone();
        self.predict(u)?;
        Ok(state)
    }

    /// Stage index of the next measurement.
    fn stage(&self) -> usize;
    fn prior_mean(&self) -> &DVector<f64>;
    /// Latest posterior, if any measurement has been consumed.
    fn last_state(&self) -> Option<&FilterState>;
}

/// `K = P Cᵀ S⁻¹` and the Joseph-free update `P − K S Kᵀ`.
pub(crate) fn kalman_update(prior_cov: &DMatrix<f64>, c: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let ch = crate::psd::symmetrize(s).cholesky()?;
    let pct = prior_cov * c.transpose();
    let gain = ch.solve(&pct.transpose()).transpose();
    let post = prior_cov - &gain * s * gain.transpose();
    Some((gain, crate::psd::symmetrize(&post)))
}

pub(crate) fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(crate::error::Error::NonFinite(what))
    }
}

pub(crate) fn entry<T: Copy>(seq: &[T], t: usize) -> T {
    seq[t.min(seq.len() - 1)]
}

