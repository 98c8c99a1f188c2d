//! Dense convex QP `min ½xᵀHx + gᵀx  s.t.  Ax ≤ b` by a primal-dual
//! interior-point method with Mehrotra predictor–corrector steps.

#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const MAX_ITERS: usize = 100;
const TOL: f64 = 1e-9;
const REGULARIZATION: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
}

/// Solves the QP; `H` must be positive semidefinite and the feasible set
/// nonempty. Starts from an infeasible point, so no phase-one is needed.
pub fn solve_qp(h: &DMatrix<f64>, g: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<QpSolution> {
    let n = g.len();
    let m = b.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::DimensionMismatch { context: "qp hessian", expected: n, found: h.nrows() });
    }
    if a.nrows() != m || a.ncols() != n {
        return Err(Error::DimensionMismatch { context: "qp constraints", expected: m, found: a.nrows() });
    }
    let obj_scale = 1.0 / g.amax().max(h.amax()).max(1.0);
    let (h, g) = (&(h * obj_scale), &(g * obj_scale));
    let mut x = DVector::zeros(n);
    if m == 0 {
        let chol = (h + DMatrix::identity(n, n) * REGULARIZATION).cholesky().ok_or(Error::NonFinite("qp hessian"))?;
        x = chol.solve(&(-g));
        return Ok(QpSolution { x, iterations: 1 });
    }
    let mut s = (b - a * &x).map(|v| v.max(1.0));
    let mut z = DVector::from_element(m, 1.0);
    let scale = 1.0 + b.amax();

    for it in 0..MAX_ITERS {
        let r_d = h * &x + g + a.transpose() * &z;
        let r_p = a * &x + &s - b;
        let mu = s.dot(&z) / m as f64;
        if r_d.amax() <= TOL * scale && r_p.amax() <= TOL * scale && mu <= TOL * 1e-2 * scale {
            return Ok(QpSolution { x, iterations: it });
        }

        let w = z.component_div(&s);
        let mut kkt = h + a.transpose() * DMatrix::from_diagonal(&w) * a;
        for i in 0..n {
            kkt[(i, i)] += REGULARIZATION;
        }
        let Some(chol) = kkt.cholesky() else {
            if r_d.amax() <= 1e-6 * scale && r_p.amax() <= 1e-6 * scale && mu <= 1e-8 * scale {
                return Ok(QpSolution { x, iterations: it });
            }
            return Err(Error::NonFinite("qp normal equations"));
        };

        let direction = |r_c: &DVector<f64>| {
            let t = (-r_c + z.component_mul(&r_p)).component_div(&s);
            let dx = chol.solve(&(-&r_d - a.transpose() * t));
            let ds = -&r_p - a * &dx;
            let dz = (-r_c - z.component_mul(&ds)).component_div(&s);
            (dx, ds, dz)
        };

        let r_aff = s.component_mul(&z);
        let (_, ds_a, dz_a) = direction(&r_aff);
        let alpha_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&z, &dz_a));
        let mu_aff = (&s + &ds_a * alpha_aff).dot(&(&z + &dz_a * alpha_aff)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        let r_c = r_aff + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
        let (dx, ds, dz) = direction(&r_c);
        let alpha = (0.99 * step_to_boundary(&s, &ds).min(step_to_boundary(&z, &dz))).min(1.0);
        x += &dx * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("qp iterate"));
        }
    }
    Ok(QpSolution { x, iterations: MAX_ITERS })
}

fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(vi, d)| -vi / d)
        .fold(1.0, f64::min)
}
