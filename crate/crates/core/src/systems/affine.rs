//! Affine model `f(x, u) = A x + B u + c`, `h(x) = C x + d`. Zero curvature.

use nalgebra::{DMatrix, DVector};

use super::NonlinearSystem;
use crate::ambiguity::CurvatureConstants;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AffineSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c_offset: DVector<f64>,
    pub h: DMatrix<f64>,
    pub d_offset: DVector<f64>,
}

impl AffineSystem {
    /// Linear system `x⁺ = A x`, `y = H x` without inputs or offsets.
    pub fn linear(a: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        let nx = a.nrows();
        AffineSystem::new(a, DMatrix::zeros(nx, 0), DVector::zeros(nx), h.clone(), DVector::zeros(h.nrows()))
    }

    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c_offset: DVector<f64>,
        h: DMatrix<f64>,
        d_offset: DVector<f64>,
    ) -> Result<Self> {
        let nx = a.nrows();
        let checks = [
            ("A columns", nx, a.ncols()),
            ("B rows", nx, b.nrows()),
            ("state offset", nx, c_offset.len()),
            ("H columns", nx, h.ncols()),
            ("measurement offset", h.nrows(), d_offset.len()),
        ];
        for (context, expected, found) in checks {
            if expected != found {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    found,
                });
            }
        }
        Ok(AffineSystem {
            a,
            b,
            c_offset,
            h,
            d_offset,
        })
    }
}

impl NonlinearSystem for AffineSystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn meas_dim(&self) -> usize {
        self.h.nrows()
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a * x + &self.c_offset;
        if self.b.ncols() > 0 {
            next += &self.b * u;
        }
        next
    }

    fn dynamics_jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.h * x + &self.d_offset)
    }

    fn measurement_jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.h.clone())
    }

    fn curvature(&self) -> CurvatureConstants {
        CurvatureConstants::zero()
    }
}
