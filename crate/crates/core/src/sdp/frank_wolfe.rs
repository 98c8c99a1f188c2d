//! Conditional-gradient solver for the stage problem.
//!
//! The objective `f(Σ_ε) = min_K Tr(L Ω Lᵀ)` with `L = [I − KC, −K]` and
//! `Ω = blkdiag(AΣAᵀ, 0) + Σ_ε` is concave, with gradient `LᵀL ⪰ 0` at the
//! optimal gain. Over the Bures ball the linear maximization
//! `max ⟨D, Σ⟩ s.t. ℬ(Σ, Σ̂) ≤ θ` is solved by
//! `Σ = γ²(γI − D)⁻¹ Σ̂ (γI − D)⁻¹` with γ > λ_max(D) the root of
//! `⟨Σ̂, (D (γI − D)⁻¹)²⟩ = θ²`. Every such point already satisfies
//! `Σ ⪰ λ_min(Σ̂) I`, so iterates stay feasible without projection.

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;

use super::{feasibility_residual, kalman_solution, SdpDiagnostics, SolverKind, StageSdpProblem, StageSdpSolution};
use crate::error::{Error, Result};
use crate::psd::{spd_inverse, sym_apply, sym_eigen, symmetrize};
use alloc::boxed::Box;

/// Consecutive small relative changes required to stop.
const STALL_WINDOW: usize = 5;
const LINE_SEARCH_ITERS: usize = 30;

struct Eval {
    objective: f64,
    gain: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    grad: DMatrix<f64>,
}

struct Oracle<'a> {
    problem: &'a StageSdpProblem,
    nx: usize,
    ny: usize,
}

impl<'a> Oracle<'a> {
    fn eval(&self, sigma: &DMatrix<f64>) -> Option<Eval> {
        let (prior, t, s) = self.problem.moments(sigma);
        let s_inv = spd_inverse(&s)?;
        let gain = &t * &s_inv;
        let objective = prior.trace() - (&gain * t.transpose()).trace();
        let (nx, ny) = (self.nx, self.ny);
        let mut l = DMatrix::zeros(nx, nx + ny);
        let mut left = DMatrix::identity(nx, nx) - &gain * self.problem.c();
        l.view_mut((0, 0), (nx, nx)).copy_from(&left);
        left = -&gain;
        l.view_mut((0, nx), (nx, ny)).copy_from(&left);
        let grad = symmetrize(&(l.transpose() * l));
        Some(Eval {
            objective,
            gain,
            s_inv,
            grad,
        })
    }

    /// First and second derivative of the objective along `dir` at the point
    /// whose evaluation is `e`.
    fn directional(&self, e: &Eval, dir: &DMatrix<f64>) -> (f64, f64) {
        let (nx, ny) = (self.nx, self.ny);
        let c = self.problem.c();
        let dxx = dir.view((0, 0), (nx, nx));
        let dxv = dir.view((0, nx), (nx, ny));
        let t_dir = dxx * c.transpose() + dxv;
        let cw = c * dxv;
        let s_dir = c * dxx * c.transpose() + dir.view((nx, nx), (ny, ny)) + &cw + cw.transpose();
        let first = e.grad.dot(dir);
        let err = t_dir - &e.gain * s_dir;
        let second = -2.0 * (&err * &e.s_inv * err.transpose()).trace();
        (first, second)
    }
}

/// Linear maximization of `⟨D, Σ⟩` over the Bures ball of radius `theta`.
pub(crate) fn bures_linear_oracle(grad: &DMatrix<f64>, nominal: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    let (lam, vecs) = sym_eigen(grad);
    let n = lam.len();
    let lam_max = lam[n - 1];
    if lam_max <= 0.0 || theta <= 0.0 {
        return nominal.clone();
    }
    let rotated = symmetrize(&(vecs.transpose() * nominal * &vecs));
    let lam: alloc::vec::Vec<f64> = lam.iter().map(|&l| l.max(0.0)).collect();
    let weights: alloc::vec::Vec<f64> = (0..n).map(|i| rotated[(i, i)].max(0.0)).collect();
    let theta_sq = theta * theta;

    // g(u) with γ = λ_max + u is strictly decreasing in u > 0.
    let g = |u: f64| -> f64 {
        let gamma = lam_max + u;
        lam.iter()
            .zip(&weights)
            .map(|(&l, &w)| {
                let r = l / (gamma - l);
                w * r * r
            })
            .sum()
    };
    let total: f64 = lam.iter().zip(&weights).map(|(&l, &w)| w * l * l).sum();
    let top: f64 = lam
        .iter()
        .zip(&weights)
        .filter(|(&l, _)| l >= lam_max * (1.0 - 1e-12))
        .map(|(_, &w)| w)
        .sum();
    let mut hi = total.sqrt() / theta;
    let mut lo = (top.sqrt() * lam_max / theta).min(hi);
    if lo <= 0.0 {
        lo = hi * 1e-16;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > theta_sq {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let gamma = lam_max + 0.5 * (lo + hi);
    let ratio: alloc::vec::Vec<f64> = lam.iter().map(|&l| gamma / (gamma - l)).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| rotated[(i, j)] * ratio[i] * ratio[j]);
    symmetrize(&(&vecs * scaled * vecs.transpose()))
}

/// Solve the stage SDP. Zero radius short-circuits to the Kalman solution.
///
/// Stops when the Frank–Wolfe gap falls below `tol_obj·(1 + |f|)` or the
/// relative objective change stays below `tol_obj` for five consecutive
/// iterations. Exhausting `max_iters` returns [`Error::Convergence`] carrying
/// the last iterate.
pub fn solve_stage_sdp(problem: &StageSdpProblem, tol_obj: f64, max_iters: usize) -> Result<StageSdpSolution> {
    if problem.radius() == 0.0 {
        return kalman_solution(problem);
    }
    let oracle = Oracle {
        problem,
        nx: problem.n_x(),
        ny: problem.n_y(),
    };
    let nominal = problem.nominal().cov();
    let theta = problem.radius();
    let mut sigma = nominal.clone();
    let mut current = oracle
        .eval(&sigma)
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: 0.0 })?;
    let mut stall = 0usize;
    let mut gap = f64::INFINITY;
    let mut iterations = 0usize;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let vertex = bures_linear_oracle(&current.grad, nominal, theta);
        let dir = &vertex - &sigma;
        let (slope0, _) = oracle.directional(&current, &dir);
        gap = slope0.max(0.0);
        if gap <= tol_obj * (1.0 + current.objective.abs()) {
            converged = true;
            break;
        }

        let step = line_search(&oracle, &sigma, &dir, slope0, &current);
        let next_sigma = symmetrize(&(&sigma + &dir * step));
        let next = match oracle.eval(&next_sigma) {
            Some(e) => e,
            None => break,
        };
        let change = (next.objective - current.objective).abs() / current.objective.abs().max(1e-300);
        sigma = next_sigma;
        current = next;
        if change < tol_obj {
            stall += 1;
            if stall >= STALL_WINDOW {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
    }

    // Floor clipping only matters for round-off; oracle points satisfy it exactly.
    let floor = problem.lambda_floor();
    if crate::psd::min_eigenvalue(&sigma) < floor {
        sigma = sym_apply(&sigma, |l| l.max(floor));
    }

    let diagnostics = SdpDiagnostics {
        solver: SolverKind::FrankWolfe,
        iterations,
        feasibility_residual: feasibility_residual(problem, &sigma),
        objective_gap: gap,
    };
    let solution = StageSdpSolution::from_stacked_cov(problem, &sigma, diagnostics)?;
    if converged {
        Ok(solution)
    } else {
        Err(Error::Convergence {
            iterations,
            gap,
            best: Box::new(solution),
        })
    }
}

/// Exact line search on the concave segment objective: safeguarded Newton on
/// the directional derivative over [0, 1].
fn line_search(oracle: &Oracle<'_>, sigma: &DMatrix<f64>, dir: &DMatrix<f64>, slope0: f64, at0: &Eval) -> f64 {
    let end = symmetrize(&(sigma + dir));
    if let Some(e1) = oracle.eval(&end) {
        let (s1, _) = oracle.directional(&e1, dir);
        if s1 >= 0.0 {
            return 1.0;
        }
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let (_, curv0) = oracle.directional(at0, dir);
    let mut alpha = if curv0 < 0.0 { (-slope0 / curv0).clamp(0.0, 1.0) } else { 0.5 };
    if alpha <= lo || alpha >= hi {
        alpha = 0.5;
    }
    for _ in 0..LINE_SEARCH_ITERS {
        let point = symmetrize(&(sigma + dir * alpha));
        let Some(e) = oracle.eval(&point) else {
            hi = alpha;
            alpha = 0.5 * (lo + hi);
            continue;
        };
        let (d1, d2) = oracle.directional(&e, dir);
        if d1 > 0.0 {
            lo = alpha;
        } else {
            hi = alpha;
        }
        if d1.abs() <= 1e-14 * slope0.abs() || hi - lo < 1e-12 {
            break;
        }
        let newton = if d2 < 0.0 { alpha - d1 / d2 } else { f64::NAN };
        alpha = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::NominalStackedNoise;
    use crate::psd::{bures_sq, PsdMatrix};
    use crate::sdp::{build_stage_problem, verify_solution};
    use approx::assert_relative_eq;

    fn one(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_problem(theta: f64) -> StageSdpProblem {
        let n = NominalStackedNoise::centered(
            PsdMatrix::from_diagonal(&[1.0]).unwrap(),
            PsdMatrix::from_diagonal(&[1.0]).unwrap(),
        )
        .unwrap();
        build_stage_problem(Some(&one(1.0)), &one(1.0), Some(&PsdMatrix::identity(1)), &n, theta, false).unwrap()
    }

    #[test]
    fn oracle_lands_on_sphere() {
        let d = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.1, 0.0, 0.1, 0.3]);
        let nominal = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.0, 0.0, 0.0, 0.2]);
        for theta in [0.01, 0.3, 2.0] {
            let s = bures_linear_oracle(&d, &nominal, theta);
            assert_relative_eq!(bures_sq(&s, &nominal).sqrt(), theta, epsilon = 1e-8);
            assert!(crate::psd::min_eigenvalue(&s) >= 0.2 - 1e-12);
        }
    }

    #[test]
    fn oracle_beats_random_feasible_points() {
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let nominal = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let theta = 0.4;
        let best = bures_linear_oracle(&d, &nominal, theta).dot(&d);
        for k in 0..200 {
            let a = (k as f64) * 0.173;
            let m = DMatrix::from_row_slice(2, 2, &[a.cos(), a.sin(), -a.sin() * 0.5, a.cos() * 0.7]);
            let cand = &nominal + (&m * m.transpose()) * 0.3 - DMatrix::identity(2, 2) * 0.1;
            if crate::psd::min_eigenvalue(&cand) < 0.0 || bures_sq(&cand, &nominal).sqrt() > theta {
                continue;
            }
            assert!(cand.dot(&d) <= best + 1e-9);
        }
    }

    #[test]
    fn converges_and_verifies_on_scalar_problem() {
        let p = scalar_problem(0.5);
        let sol = solve_stage_sdp(&p, 1e-9, 5000).unwrap();
        assert!(sol.objective > 2.0 / 3.0);
        let report = verify_solution(&p, &sol, 1e-7);
        assert!(report.all_ok(), "{report:?}");
        assert!(sol.diagnostics.feasibility_residual <= 1e-8);
    }

    #[test]
    fn uninformative_measurement_has_zero_gain() {
        let n = NominalStackedNoise::centered(
            PsdMatrix::from_diagonal(&[0.5, 0.2]).unwrap(),
            PsdMatrix::from_diagonal(&[0.7]).unwrap(),
        )
        .unwrap();
        let c = DMatrix::zeros(1, 2);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let p = build_stage_problem(Some(&a), &c, Some(&PsdMatrix::identity(2)), &n, 0.0, false).unwrap();
        let sol = solve_stage_sdp(&p, 1e-7, 100).unwrap();
        assert!(sol.gain.norm() < 1e-15);
        assert_relative_eq!(sol.posterior_cov.as_matrix(), sol.prior_cov.as_matrix(), epsilon = 1e-14);
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let p = scalar_problem(0.5);
        match solve_stage_sdp(&p, 1e-300, 3) {
            Err(Error::Convergence { iterations, best, .. }) => {
                assert_eq!(iterations, 3);
                assert!(best.objective > 2.0 / 3.0);
            }
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }
}
