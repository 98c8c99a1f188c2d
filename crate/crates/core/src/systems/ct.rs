//! Coordinated-turn target with range–bearing measurements.

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use super::{curvature_constants, wrap_angle, NonlinearSystem, OperatingRegion, SystemId, RANGE_FLOOR};
use crate::ambiguity::CurvatureConstants;
use crate::error::{Error, Result};

/// Below this |ωΔt| the turn terms use their Taylor expansions.
const SMALL_TURN: f64 = 1e-6;
/// Below this |ωΔt| the ω-derivatives of the turn terms use series.
const SMALL_TURN_DERIV: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtState {
    pub px: f64,
    pub py: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

impl CtState {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&[self.px, self.py, self.vx, self.vy, self.omega])
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        CtState {
            px: x[0],
            py: x[1],
            vx: x[2],
            vy: x[3],
            omega: x[4],
        }
    }
}

/// sin(ωΔt)/ω and (1 − cos(ωΔt))/ω.
fn turn_terms(omega: f64, dt: f64) -> (f64, f64) {
    let z = omega * dt;
    if z.abs() < SMALL_TURN {
        (dt * (1.0 - z * z / 6.0), dt * z / 2.0)
    } else {
        let half = (0.5 * z).sin();
        (z.sin() / omega, 2.0 * half * half / omega)
    }
}

/// ω-derivatives of the two turn terms.
fn turn_term_derivatives(omega: f64, dt: f64) -> (f64, f64) {
    let z = omega * dt;
    let t2 = dt * dt;
    if z.abs() < SMALL_TURN_DERIV {
        let z2 = z * z;
        let da = -z / 3.0 + z * z2 / 30.0 - z * z2 * z2 / 840.0 + z * z2 * z2 * z2 / 45360.0;
        let db = 0.5 - z2 / 8.0 + z2 * z2 / 144.0 - z2 * z2 * z2 / 5760.0;
        (t2 * da, t2 * db)
    } else {
        let (s, c) = (z.sin(), z.cos());
        let w2 = omega * omega;
        ((z * c - s) / w2, (z * s - (1.0 - c)) / w2)
    }
}

/// One exact CT step; the turn rate is carried unchanged.
pub fn ct_dynamics(x: &CtState, dt: f64) -> CtState {
    let (a, b) = turn_terms(x.omega, dt);
    let z = x.omega * dt;
    let (s, c) = (z.sin(), z.cos());
    CtState {
        px: x.px + a * x.vx - b * x.vy,
        py: x.py + b * x.vx + a * x.vy,
        vx: c * x.vx - s * x.vy,
        vy: s * x.vx + c * x.vy,
        omega: x.omega,
    }
}

/// Range and four-quadrant bearing of the position.
pub fn ct_measurement(x: &CtState) -> Result<(f64, f64)> {
    let r = x.px.hypot(x.py);
    if r < RANGE_FLOOR {
        return Err(Error::SingularMeasurement("target at the sensor origin"));
    }
    Ok((r, x.py.atan2(x.px)))
}

/// CT model with sampling time Δt.
///
/// The benchmark target starts at the sensor, where range–bearing has no
/// derivative. With `uninformative_at_origin` set, positions within
/// [`RANGE_FLOOR`] of the origin measure as `(‖p‖, 0)` with a zero Jacobian
/// (the update then carries no measurement information); otherwise they
/// are a [`Error::SingularMeasurement`].
#[derive(Clone, Debug)]
pub struct CoordinatedTurn {
    pub dt: f64,
    pub curvature: CurvatureConstants,
    pub region: Option<OperatingRegion>,
    pub uninformative_at_origin: bool,
}

impl CoordinatedTurn {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("sampling time must be positive, got {dt}")));
        }
        Ok(CoordinatedTurn {
            dt,
            curvature: curvature_constants(SystemId::CoordinatedTurn),
            region: None,
            uninformative_at_origin: true,
        })
    }
}

impl NonlinearSystem for CoordinatedTurn {
    fn state_dim(&self) -> usize {
        5
    }

    fn input_dim(&self) -> usize {
        0
    }

    fn meas_dim(&self) -> usize {
        2
    }

    fn dynamics(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        ct_dynamics(&CtState::from_vector(x), self.dt).to_vector()
    }

    fn dynamics_jacobian(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        let st = CtState::from_vector(x);
        let dt = self.dt;
        let (a, b) = turn_terms(st.omega, dt);
        let (da, db) = turn_term_derivatives(st.omega, dt);
        let z = st.omega * dt;
        let (s, c) = (z.sin(), z.cos());
        #[rustfmt::skip]
        let j = DMatrix::from_row_slice(5, 5, &[
            1.0, 0.0, a,   -b,  da * st.vx - db * st.vy,
            0.0, 1.0, b,    a,  db * st.vx + da * st.vy,
            0.0, 0.0, c,   -s,  -dt * (s * st.vx + c * st.vy),
            0.0, 0.0, s,    c,  dt * (c * st.vx - s * st.vy),
            0.0, 0.0, 0.0, 0.0, 1.0,
        ]);
        j
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if self.uninformative_at_origin && x[0].hypot(x[1]) < RANGE_FLOOR {
            return Ok(DVector::from_column_slice(&[x[0].hypot(x[1]), 0.0]));
        }
        let (r, b) = ct_measurement(&CtState::from_vector(x))?;
        Ok(DVector::from_column_slice(&[r, b]))
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (px, py) = (x[0], x[1]);
        let r2 = px * px + py * py;
        let r = r2.sqrt();
        if r < RANGE_FLOOR {
            if self.uninformative_at_origin {
                return Ok(DMatrix::zeros(2, 5));
            }
            return Err(Error::SingularMeasurement("target at the sensor origin"));
        }
        #[rustfmt::skip]
        let j = DMatrix::from_row_slice(2, 5, &[
            px / r,   py / r,  0.0, 0.0, 0.0,
            -py / r2, px / r2, 0.0, 0.0, 0.0,
        ]);
        Ok(j)
    }

    fn curvature(&self) -> CurvatureConstants {
        self.curvature
    }

    fn wrap_innovation(&self, residual: &mut DVector<f64>) {
        residual[1] = wrap_angle(residual[1]);
    }

    fn operating_region(&self) -> Option<&OperatingRegion> {
        self.region.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::finite_difference_jacobian;
    use core::f64::consts::PI;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_velocity_is_stationary() {
        let x = CtState {
            px: 3.0,
            py: -1.0,
            vx: 0.0,
            vy: 0.0,
            omega: 0.4,
        };
        assert_eq!(ct_dynamics(&x, 0.2), x);
    }

    #[test]
    fn table_initial_mean_step() {
        let x = CtState {
            px: 0.0,
            py: 0.0,
            vx: 2.0,
            vy: 0.0,
            omega: 0.3,
        };
        let y = ct_dynamics(&x, 0.2);
        assert!((y.px - 0.399760).abs() < 5e-7);
        // exact value 0.01199640…
        assert!((y.py - 0.0119964).abs() < 5e-8);
        // 2·cos(0.06) = 1.99640108…
        assert!((y.vx - 1.996401).abs() < 5e-7);
        assert!((y.vy - 0.119928).abs() < 5e-7);
        assert_eq!(y.omega, 0.3);
    }

    #[test]
    fn straight_line_limit() {
        let x = CtState {
            px: 1.0,
            py: 2.0,
            vx: 0.5,
            vy: -0.25,
            omega: 0.0,
        };
        let y = ct_dynamics(&x, 0.2);
        assert!((y.px - 1.1).abs() < 1e-15);
        assert!((y.py - 1.95).abs() < 1e-15);
        assert_eq!((y.vx, y.vy, y.omega), (0.5, -0.25, 0.0));
        // A turn rate of 1e-8 genuinely rotates the velocity by ωΔt, so the
        // deviation is bounded by that rotation, not by a fixed constant.
        let speed = x.vx.hypot(x.vy);
        for w in [1e-8, -1e-8] {
            let z = ct_dynamics(&CtState { omega: w, ..x }, 0.2);
            let bound = 1e-10 + (w * 0.2).abs() * speed;
            assert!((z.px - y.px).abs() <= bound);
            assert!((z.py - y.py).abs() <= bound);
            assert!((z.vx - y.vx).abs() <= bound);
            assert!((z.vy - y.vy).abs() <= bound);
        }
    }

    #[test]
    fn branches_agree_at_switch() {
        for dt in [0.05, 0.2, 1.0] {
            for sign in [1.0, -1.0] {
                let below = sign * SMALL_TURN * (1.0 - 1e-9) / dt;
                let above = sign * SMALL_TURN * (1.0 + 1e-9) / dt;
                let (a0, b0) = turn_terms(below, dt);
                let (a1, b1) = turn_terms(above, dt);
                assert!((a0 - a1).abs() <= 1e-12 && (b0 - b1).abs() <= 1e-12);
                let below = sign * SMALL_TURN_DERIV * (1.0 - 1e-9) / dt;
                let above = sign * SMALL_TURN_DERIV * (1.0 + 1e-9) / dt;
                let (a0, b0) = turn_term_derivatives(below, dt);
                let (a1, b1) = turn_term_derivatives(above, dt);
                assert!((a0 - a1).abs() <= 1e-10 && (b0 - b1).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn measurement_values() {
        let at = |px, py| CtState {
            px,
            py,
            vx: 0.0,
            vy: 0.0,
            omega: 0.0,
        };
        assert_eq!(ct_measurement(&at(1.0, 0.0)).unwrap(), (1.0, 0.0));
        let (r, b) = ct_measurement(&at(0.0, 2.0)).unwrap();
        assert_eq!(r, 2.0);
        assert!((b - PI / 2.0).abs() < 1e-15);
        assert!(matches!(ct_measurement(&at(0.0, 0.0)), Err(Error::SingularMeasurement(_))));
    }

    #[test]
    fn origin_policy() {
        let mut sys = CoordinatedTurn::new(0.2).unwrap();
        let x = DVector::from_column_slice(&[0.0, 0.0, 2.0, 0.0, 0.3]);
        assert_eq!(sys.measurement_jacobian(&x).unwrap(), DMatrix::zeros(2, 5));
        assert_eq!(sys.measure(&x).unwrap().as_slice(), &[0.0, 0.0]);
        sys.uninformative_at_origin = false;
        assert!(sys.measure(&x).is_err());
        assert!(sys.measurement_jacobian(&x).is_err());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let sys = CoordinatedTurn::new(0.2).unwrap();
        let u = DVector::zeros(0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..200 {
            let omega = if k % 10 == 0 { rng.random_range(-1e-3..1e-3) } else { rng.random_range(-1.0..1.0) };
            let x = DVector::from_column_slice(&[
                rng.random_range(1.0..20.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                omega,
            ]);
            let fd = finite_difference_jacobian(|z| sys.dynamics(z, &u), &x, 1e-6);
            let an = sys.dynamics_jacobian(&x, &u);
            assert!((&fd - &an).norm() <= 1e-5 * an.norm().max(1.0), "{fd} vs {an}");
            let fd = finite_difference_jacobian(|z| sys.measure(z).unwrap(), &x, 1e-6);
            let an = sys.measurement_jacobian(&x).unwrap();
            assert!((&fd - &an).norm() <= 1e-6 * an.norm().max(1.0));
        }
    }
}
