//! System models: the trait the filters consume, plus the coordinated-turn,
//! unicycle and affine models.

use core::f64::consts::PI;
use core::str::FromStr;

use alloc::string::ToString;
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::ambiguity::CurvatureConstants;
use crate::error::{Error, Result};

mod affine;
mod ct;
mod unicycle;

pub use affine::AffineSystem;
pub use ct::{ct_dynamics, ct_measurement, CoordinatedTurn, CtState};
pub use unicycle::{beacon_measurement, unicycle_dynamics, Unicycle, UnicycleState};

/// Ranges below this are treated as singular (the bearing/Jacobian blow up).
pub const RANGE_FLOOR: f64 = 1e-6;

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = a - two_pi * ((a + PI) / two_pi).floor();
    // r ∈ [−π, π); move the closed end to +π
    if r <= -PI {
        r + two_pi
    } else {
        r
    }
}

/// Axis-aligned box the curvature constants are trusted on.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingRegion {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl OperatingRegion {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                context: "operating region bounds",
                expected: lower.len(),
                found: upper.len(),
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidConfig("operating region has lower > upper".to_string()));
        }
        Ok(OperatingRegion { lower, upper })
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.lower.len()
            && x
                .iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

/// `x_{t+1} = f(x_t, u_t) + w_t`, `y_t = h(x_t) + v_t`.
pub trait NonlinearSystem {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn meas_dim(&self) -> usize;

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// ∂f/∂x
    fn dynamics_jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// ∂h/∂x
    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn curvature(&self) -> CurvatureConstants;

    /// Wrap angular components of a measurement residual in place.
    fn wrap_innovation(&self, _residual: &mut DVector<f64>) {}

    /// Estimation error `truth − estimate`, with angular states wrapped.
    fn state_error(&self, truth: &DVector<f64>, estimate: &DVector<f64>) -> DVector<f64> {
        truth - estimate
    }

    /// Re-normalize a state after an additive correction (e.g. wrap headings).
    fn normalize_state(&self, _x: &mut DVector<f64>) {}

    fn operating_region(&self) -> Option<&OperatingRegion> {
        None
    }
}

/// Named benchmark systems with tabulated curvature constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemId {
    CoordinatedTurn,
    SafeNavUnicycle,
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct" | "coordinated_turn" => Ok(SystemId::CoordinatedTurn),
            "unicycle" | "safe_nav" => Ok(SystemId::SafeNavUnicycle),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }
}

impl SystemId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SystemId::CoordinatedTurn => "ct",
            SystemId::SafeNavUnicycle => "unicycle",
        }
    }
}

/// (L_f, L_h) for each benchmark, with α_f = α_h = √3.
pub fn curvature_constants(id: SystemId) -> CurvatureConstants {
    let (lf, lh) = match id {
        SystemId::CoordinatedTurn => (0.3, 0.2),
        SystemId::SafeNavUnicycle => (0.3, 0.5),
    };
    CurvatureConstants::with_default_alpha(lf, lh).expect("tabulated constants are valid")
}

/// Central finite-difference Jacobian, used by tests and as a debugging aid.
pub fn finite_difference_jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let fx = f(x);
    let mut jac = DMatrix::zeros(fx.len(), x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let col = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.set_column(j, &col);
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::DEFAULT_ALPHA;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_angle(0.1 + 4.0 * PI) - 0.1).abs() < 1e-13);
        for k in -50..50 {
            let w = wrap_angle(k as f64 * 0.37);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn tabulated_curvature() {
        let ct = curvature_constants("ct".parse().unwrap());
        assert_eq!((ct.lf, ct.lh), (0.3, 0.2));
        let sn = curvature_constants("safe_nav".parse().unwrap());
        assert_eq!((sn.lf, sn.lh), (0.3, 0.5));
        assert_eq!(ct.alpha_f, DEFAULT_ALPHA);
        assert_eq!(sn.alpha_h, 3f64.sqrt());
        assert!(matches!("cv".parse::<SystemId>(), Err(Error::UnknownSystem(_))));
    }

    #[test]
    fn operating_region_membership() {
        let r = OperatingRegion::new(DVector::from_element(2, -1.0), DVector::from_element(2, 1.0)).unwrap();
        assert!(r.contains(&DVector::from_element(2, 0.5)));
        assert!(!r.contains(&DVector::from_vec(alloc::vec![0.0, 1.5])));
        assert!(OperatingRegion::new(DVector::from_element(1, 1.0), DVector::from_element(1, 0.0)).is_err());
    }
}
