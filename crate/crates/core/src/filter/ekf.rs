use nalgebra::{DMatrix, DVector};

use super::{check_finite, kalman_update, Estimator, FilterState, NoiseModel};
use crate::error::{Error, Result};
use crate::psd::{symmetrize, PsdMatrix};
use crate::systems::NonlinearSystem;

/// Added to the innovation covariance before factorization.
pub const EKF_INNOVATION_REGULARIZATION: f64 = 1e-12;

/// Standard EKF with fixed noise statistics (nominal or true).
pub struct Ekf<'a, S: NonlinearSystem + ?Sized> {
    system: &'a S,
    model: NoiseModel,
    stage: usize,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    last: Option<FilterState>,
    awaiting_predict: bool,
}

impl<'a, S: NonlinearSystem + ?Sized> Ekf<'a, S> {
    pub fn new(system: &'a S, model: NoiseModel) -> Self {
        Ekf {
            system,
            prior_mean: model.x0.mean().clone(),
            prior_cov: model.x0.cov().as_matrix().clone(),
            model,
            stage: 0,
            last: None,
            awaiting_predict: false,
        }
    }

    fn update_inner(&mut self, y: &DVector<f64>) -> Result<()> {
        if self.awaiting_predict {
            return Err(Error::CallOrder("update called twice without predict"));
        }
        check_finite(y, "measurement")?;
        let c = self.system.measurement_jacobian(&self.prior_mean)?;
        let ny = c.nrows();
        let s = &c * &self.prior_cov * c.transpose()
            + self.model.v.cov().as_matrix()
            + DMatrix::identity(ny, ny) * EKF_INNOVATION_REGULARIZATION;
        let (gain, post) =
            kalman_update(&self.prior_cov, &c, &s).ok_or(Error::SingularMeasurement("innovation covariance"))?;
        let mut innovation = y - self.system.measure(&self.prior_mean)? - self.model.v.mean();
        self.system.wrap_innovation(&mut innovation);
        let mut mean = &self.prior_mean + &gain * innovation;
        self.system.normalize_state(&mut mean);
        self.last = Some(FilterState {
            stage: self.stage,
            prior_mean: self.prior_mean.clone(),
            prior_cov: PsdMatrix::new(self.prior_cov.clone())?,
            posterior_mean: mean,
            posterior_cov: PsdMatrix::with_tolerance(post, 1e-6)?,
        });
        self.awaiting_predict = true;
        Ok(())
    }
}

impl<'a, S: NonlinearSystem + ?Sized> Estimator for Ekf<'a, S> {
    fn update(&mut self, y: &DVector<f64>) -> Result<&FilterState> {
        let t = self.stage;
        self.update_inner(y).map_err(|e| e.at_stage(t))?;
        Ok(self.last.as_ref().expect("just set"))
    }

    fn predict(&mut self, u: &DVector<f64>) -> Result<()> {
        if !self.awaiting_predict {
            return Err(Error::CallOrder("predict called before update"));
        }
        let last = self.last.as_ref().expect("update ran");
        let a = self.system.dynamics_jacobian(&last.posterior_mean, u);
        let mut mean = self.system.dynamics(&last.posterior_mean, u) + self.model.w.mean();
        self.system.normalize_state(&mut mean);
        check_finite(&mean, "predicted state").map_err(|e| e.at_stage(self.stage))?;
        self.prior_cov = symmetrize(&(&a * last.posterior_cov.as_matrix() * a.transpose() + self.model.w.cov().as_matrix()));
        self.prior_mean = mean;
        self.stage += 1;
        self.awaiting_predict = false;
        Ok(())
    }

    fn stage(&self) -> usize {
        self.stage
    }

    fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    fn last_state(&self) -> Option<&FilterState> {
        self.last.as_ref()
    }
}
