//! Unicycle robot with beacon ranges and a heading measurement.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use super::{curvature_constants, wrap_angle, NonlinearSystem, OperatingRegion, SystemId, RANGE_FLOOR};
use crate::ambiguity::CurvatureConstants;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnicycleState {
    pub px: f64,
    pub py: f64,
    /// heading in (−π, π]
    pub psi: f64,
}

impl UnicycleState {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.px, self.py, self.psi])
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        UnicycleState {
            px: x[0],
            py: x[1],
            psi: x[2],
        }
    }
}

/// Euler step with input (speed s, turn rate ω); heading re-wrapped.
pub fn unicycle_dynamics(x: &UnicycleState, s: f64, omega: f64, dt: f64) -> UnicycleState {
    UnicycleState {
        px: x.px + s * x.psi.cos() * dt,
        py: x.py + s * x.psi.sin() * dt,
        psi: wrap_angle(x.psi + omega * dt),
    }
}

/// Ranges to each beacon followed by the heading.
pub fn beacon_measurement(x: &UnicycleState, beacons: &[[f64; 2]]) -> Result<DVector<f64>> {
    let mut y = DVector::zeros(beacons.len() + 1);
    for (i, b) in beacons.iter().enumerate() {
        let r = (x.px - b[0]).hypot(x.py - b[1]);
        if r < RANGE_FLOOR {
            return Err(Error::SingularMeasurement("robot on top of a beacon"));
        }
        y[i] = r;
    }
    y[beacons.len()] = x.psi;
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct Unicycle {
    pub dt: f64,
    pub beacons: Vec<[f64; 2]>,
    pub curvature: CurvatureConstants,
    pub region: Option<OperatingRegion>,
}

impl Unicycle {
    pub fn new(dt: f64, beacons: Vec<[f64; 2]>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("sampling time must be positive, got {dt}")));
        }
        if beacons.is_empty() {
            return Err(Error::InvalidConfig(alloc::string::String::from("at least one beacon is required")));
        }
        Ok(Unicycle {
            dt,
            beacons,
            curvature: curvature_constants(SystemId::SafeNavUnicycle),
            region: None,
        })
    }

    /// ∂f/∂u at (x, u).
    pub fn input_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[2].sin_cos();
        DMatrix::from_row_slice(3, 2, &[c * self.dt, 0.0, s * self.dt, 0.0, 0.0, self.dt])
    }
}

impl NonlinearSystem for Unicycle {
    fn state_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn meas_dim(&self) -> usize {
        self.beacons.len() + 1
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        unicycle_dynamics(&UnicycleState::from_vector(x), u[0], u[1], self.dt).to_vector()
    }

    fn dynamics_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[2].sin_cos();
        let v = u[0] * self.dt;
        DMatrix::from_row_slice(3, 3, &[1.0, 0.0, -v * s, 0.0, 1.0, v * c, 0.0, 0.0, 1.0])
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        beacon_measurement(&UnicycleState::from_vector(x), &self.beacons)
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let m = self.beacons.len();
        let mut j = DMatrix::zeros(m + 1, 3);
        for (i, b) in self.beacons.iter().enumerate() {
            let (dx, dy) = (x[0] - b[0], x[1] - b[1]);
            let r = dx.hypot(dy);
            if r < RANGE_FLOOR {
                return Err(Error::SingularMeasurement("robot on top of a beacon"));
            }
            j[(i, 0)] = dx / r;
            j[(i, 1)] = dy / r;
        }
        j[(m, 2)] = 1.0;
        Ok(j)
    }

    fn curvature(&self) -> CurvatureConstants {
        self.curvature
    }

    fn wrap_innovation(&self, residual: &mut DVector<f64>) {
        let m = self.beacons.len();
        residual[m] = wrap_angle(residual[m]);
    }

    fn state_error(&self, truth: &DVector<f64>, estimate: &DVector<f64>) -> DVector<f64> {
        let mut e = truth - estimate;
        e[2] = wrap_angle(e[2]);
        e
    }

    fn normalize_state(&self, x: &mut DVector<f64>) {
        x[2] = wrap_angle(x[2]);
    }

    fn operating_region(&self) -> Option<&OperatingRegion> {
        self.region.as_ref()
    }
}
