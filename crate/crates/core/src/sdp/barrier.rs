//! Dense log-barrier path-following solver for small LMI programs, and the
//! full LMI formulation of the stage problem on top of it.
//!
//! This is the cross-check for the first-order solver: it optimizes over
//! (Σ_ε, Σ_x, Z) with every constraint written as an explicit LMI, so it
//! shares no algorithmic path with the Frank–Wolfe oracle.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use super::{feasibility_residual, transported_coupling, SdpDiagnostics, SolverKind, StageSdpProblem, StageSdpSolution};
use crate::error::{Error, Result};
use crate::psd::{bures_sq, min_eigenvalue, spd_inverse, symmetrize};

/// `F(x) = F₀ + Σᵢ xᵢ Fᵢ ⪰ 0`, coefficients stored sparsely by variable.
#[derive(Clone, Debug)]
pub struct LmiBlock {
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn new(constant: DMatrix<f64>) -> Self {
        LmiBlock {
            constant,
            terms: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn value(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.constant.clone();
        for (i, m) in &self.terms {
            f += m * x[*i];
        }
        f
    }
}

/// maximize cᵀx subject to a list of LMIs.
#[derive(Clone, Debug)]
pub struct LmiProgram {
    pub objective: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
}

#[derive(Clone, Copy, Debug)]
pub struct BarrierOptions {
    /// Target duality gap (`Σ block sizes / t`).
    pub gap_tol: f64,
    pub growth: f64,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            gap_tol: 1e-8,
            growth: 8.0,
            max_newton: 2000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BarrierResult {
    pub x: DVector<f64>,
    pub objective: f64,
    pub gap: f64,
    pub newton_steps: usize,
}

fn inverse_if_pd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    spd_inverse(m)
}

fn barrier_value(program: &LmiProgram, x: &DVector<f64>, t: f64) -> Option<f64> {
    let mut v = t * program.objective.dot(x);
    for b in &program.blocks {
        let ch = symmetrize(&b.value(x)).cholesky()?;
        v += 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    Some(v)
}

/// Relative barrier improvement below which centering counts as stalled.
const STALL_TOL: f64 = 1e-13;

/// Path-following from a strictly feasible `x0`.
pub fn solve_lmi(program: &LmiProgram, x0: DVector<f64>, opts: BarrierOptions) -> Result<BarrierResult> {
    let n = x0.len();
    let m: f64 = program.blocks.iter().map(|b| b.dim() as f64).sum();
    let mut x = x0;
    if barrier_value(program, &x, 1.0).is_none() {
        return Err(Error::Barrier("initial point is not strictly feasible"));
    }
    let mut t = 1.0f64;
    let mut newton_steps = 0usize;
    loop {
        // centering
        loop {
            if newton_steps >= opts.max_newton {
                return Err(Error::Barrier("Newton step limit reached"));
            }
            newton_steps += 1;
            let mut grad = &program.objective * t;
            let mut hess = DMatrix::<f64>::zeros(n, n);
            for b in &program.blocks {
                let f = symmetrize(&b.value(&x));
                let finv = inverse_if_pd(&f).ok_or(Error::Barrier("lost feasibility"))?;
                let w: Vec<(usize, DMatrix<f64>)> = b.terms.iter().map(|(i, fi)| (*i, &finv * fi)).collect();
                for (a, (ia, wa)) in w.iter().enumerate() {
                    grad[*ia] += wa.trace();
                    for (ib, wb) in w.iter().skip(a) {
                        // Tr(Wa Wb)
                        let v = wa.component_mul(&wb.transpose()).sum();
                        hess[(*ia, *ib)] -= v;
                        if ia != ib {
                            hess[(*ib, *ia)] -= v;
                        }
                    }
                }
            }
            let neg = -symmetrize(&hess);
            let step = match neg.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => {
                    let reg = &neg + DMatrix::identity(n, n) * (1e-12 * neg.diagonal().amax().max(1.0));
                    reg.cholesky().ok_or(Error::Barrier("singular Newton system"))?.solve(&grad)
                }
            };
            let decrement = grad.dot(&step);
            // self-concordant stopping rule: λ²/2 small
            if decrement.abs() < 1e-9 {
                break;
            }
            let base = barrier_value(program, &x, t).ok_or(Error::Barrier("lost feasibility"))?;
            let mut s = 1.0;
            let mut improvement = None;
            for _ in 0..60 {
                let trial = &x + &step * s;
                if let Some(v) = barrier_value(program, &trial, t) {
                    if trial == x {
                        break;
                    }
                    if v >= base + 0.25 * s * decrement {
                        x = trial;
                        improvement = Some(v - base);
                        break;
                    }
                }
                s *= 0.5;
            }
            match improvement {
                Some(d) if d > STALL_TOL * base.abs().max(1.0) => {}
                _ => break,
            }
        }
        let gap = m / t;
        if gap < opts.gap_tol {
            return Ok(BarrierResult {
                objective: program.objective.dot(&x),
                x,
                gap,
                newton_steps,
            });
        }
        t *= opts.growth;
    }
}

/// Variable layout of the stage LMI program.
struct Layout {
    n: usize,
    nx: usize,
    /// (i, j) with i ≤ j for Σ_ε
    eps: Vec<(usize, usize)>,
    /// (i, j) with i ≤ j for Σ_x
    post: Vec<(usize, usize)>,
    /// Z is full n×n, column-major after the symmetric blocks.
    z_offset: usize,
}

impl Layout {
    fn new(nx: usize, ny: usize) -> Self {
        let n = nx + ny;
        let upper = |d: usize| -> Vec<(usize, usize)> {
            let mut v = Vec::new();
            for j in 0..d {
                for i in 0..=j {
                    v.push((i, j));
                }
            }
            v
        };
        let eps = upper(n);
        let post = upper(nx);
        let z_offset = eps.len() + post.len();
        Layout {
            n,
            nx,
            eps,
            post,
            z_offset,
        }
    }

    fn len(&self) -> usize {
        self.z_offset + self.n * self.n
    }

    fn sym_basis(d: usize, i: usize, j: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(d, d);
        e[(i, j)] = 1.0;
        e[(j, i)] = 1.0;
        e
    }

    fn pack(&self, sigma_eps: &DMatrix<f64>, post: &DMatrix<f64>, z: &DMatrix<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.len());
        for (k, &(i, j)) in self.eps.iter().enumerate() {
            x[k] = sigma_eps[(i, j)];
        }
        for (k, &(i, j)) in self.post.iter().enumerate() {
            x[self.eps.len() + k] = post[(i, j)];
        }
        for c in 0..self.n {
            for r in 0..self.n {
                x[self.z_offset + c * self.n + r] = z[(r, c)];
            }
        }
        x
    }

    fn unpack_eps(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n, self.n);
        for (k, &(i, j)) in self.eps.iter().enumerate() {
            s[(i, j)] = x[k];
            s[(j, i)] = x[k];
        }
        s
    }
}

/// Solve the stage SDP with every constraint as an explicit LMI. Requires a
/// positive radius (the zero-radius feasible set has empty interior).
pub fn solve_stage_sdp_barrier(problem: &StageSdpProblem, opts: BarrierOptions) -> Result<StageSdpSolution> {
    let theta = problem.radius();
    if theta <= 0.0 {
        return Err(Error::Barrier("barrier formulation needs a positive radius"));
    }
    let (nx, ny) = (problem.n_x(), problem.n_y());
    let n = nx + ny;
    let layout = Layout::new(nx, ny);
    let nominal = problem.nominal().cov();
    let c = problem.c();

    // M = [[I, 0], [C, I]] maps (e⁻, v) covariance to (e⁻, ν) covariance.
    let mut mmap = DMatrix::identity(n, n);
    mmap.view_mut((nx, 0), (ny, nx)).copy_from(c);
    let mut offset = DMatrix::zeros(n, n);
    offset.view_mut((0, 0), (nx, nx)).copy_from(problem.prior_offset());

    // Schur LMI: M (P + Σ_ε) Mᵀ − blkdiag(Σ_x, 0) ⪰ 0
    let mut schur = LmiBlock::new(symmetrize(&(&mmap * &offset * mmap.transpose())));
    // Bures LMI: [[Σ̂, Z], [Zᵀ, Σ_ε]] ⪰ 0
    let mut bures = LmiBlock::new({
        let mut f = DMatrix::zeros(2 * n, 2 * n);
        f.view_mut((0, 0), (n, n)).copy_from(nominal);
        f
    });
    // θ² − Tr(Σ_ε + Σ̂ − 2Z) ≥ 0
    let mut trace = LmiBlock::new(DMatrix::from_element(1, 1, theta * theta - nominal.trace()));
    // Σ_ε − λ I ⪰ 0
    let mut floor = LmiBlock::new(DMatrix::identity(n, n) * -problem.lambda_floor());
    // Σ_x ⪰ 0
    let mut post_psd = LmiBlock::new(DMatrix::zeros(nx, nx));

    for (k, &(i, j)) in layout.eps.iter().enumerate() {
        let e = Layout::sym_basis(n, i, j);
        schur.terms.push((k, symmetrize(&(&mmap * &e * mmap.transpose()))));
        let mut big = DMatrix::zeros(2 * n, 2 * n);
        big.view_mut((n, n), (n, n)).copy_from(&e);
        bures.terms.push((k, big));
        if i == j {
            trace.terms.push((k, DMatrix::from_element(1, 1, -1.0)));
        }
        floor.terms.push((k, e));
    }
    for (k, &(i, j)) in layout.post.iter().enumerate() {
        let var = layout.eps.len() + k;
        let e = Layout::sym_basis(nx, i, j);
        let mut big = DMatrix::zeros(n, n);
        big.view_mut((0, 0), (nx, nx)).copy_from(&(-&e));
        schur.terms.push((var, big));
        post_psd.terms.push((var, e));
    }
    for col in 0..n {
        for row in 0..n {
            let var = layout.z_offset + col * n + row;
            let mut big = DMatrix::zeros(2 * n, 2 * n);
            big[(row, n + col)] = 1.0;
            big[(n + col, row)] = 1.0;
            bures.terms.push((var, big));
            if row == col {
                trace.terms.push((var, DMatrix::from_element(1, 1, 2.0)));
            }
        }
    }

    let mut objective = DVector::zeros(layout.len());
    for (k, &(i, j)) in layout.post.iter().enumerate() {
        if i == j {
            objective[layout.eps.len() + k] = 1.0;
        }
    }

    let x0 = strictly_feasible_start(problem, &layout)?;
    let program = LmiProgram {
        objective,
        blocks: vec![schur, bures, trace, floor, post_psd],
    };
    let result = solve_lmi(&program, x0, opts)?;
    let sigma_eps = layout.unpack_eps(&result.x);
    let diagnostics = SdpDiagnostics {
        solver: SolverKind::Barrier,
        iterations: result.newton_steps,
        feasibility_residual: feasibility_residual(problem, &sigma_eps),
        objective_gap: result.gap,
    };
    StageSdpSolution::from_stacked_cov(problem, &sigma_eps, diagnostics)
}

fn strictly_feasible_start(problem: &StageSdpProblem, layout: &Layout) -> Result<DVector<f64>> {
    let theta = problem.radius();
    let nominal = problem.nominal().cov();
    let n = layout.n;
    let mut tau = theta * problem.lambda_floor().sqrt();
    let mut sigma = nominal + DMatrix::identity(n, n) * tau;
    for _ in 0..200 {
        if bures_sq(&sigma, nominal).sqrt() <= 0.5 * theta {
            break;
        }
        tau *= 0.5;
        sigma = nominal + DMatrix::identity(n, n) * tau;
    }
    let b2 = bures_sq(&sigma, nominal);
    let z_opt = transported_coupling(nominal, &sigma);
    let kappa = (0.5f64).min((theta * theta - b2) / (4.0 * z_opt.trace().max(1e-300)));
    let z = &z_opt * (1.0 - kappa);

    let (prior, t, s) = problem.moments(&sigma);
    let s_inv = spd_inverse(&s).ok_or(Error::Barrier("innovation covariance not PD at start"))?;
    let schur = symmetrize(&(&prior - &t * s_inv * t.transpose()));
    if min_eigenvalue(&schur) <= 0.0 {
        return Err(Error::Barrier("posterior covariance not PD at start"));
    }
    let post = schur * 0.5;
    debug_assert_eq!(post.nrows(), layout.nx);
    Ok(layout.pack(&sigma, &post, &z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ambiguity::NominalStackedNoise;
    use crate::psd::PsdMatrix;
    use crate::sdp::{build_stage_problem, solve_stage_sdp, verify_solution};

    #[test]
    fn scalar_lmi_toy() {
        // maximize x s.t. 1 − x ≥ 0, x ≥ 0
        let mut a = LmiBlock::new(DMatrix::from_element(1, 1, 1.0));
        a.terms.push((0, DMatrix::from_element(1, 1, -1.0)));
        let mut b = LmiBlock::new(DMatrix::zeros(1, 1));
        b.terms.push((0, DMatrix::from_element(1, 1, 1.0)));
        let prog = LmiProgram {
            objective: DVector::from_element(1, 1.0),
            blocks: vec![a, b],
        };
        let r = solve_lmi(&prog, DVector::from_element(1, 0.5), BarrierOptions::default()).unwrap();
        assert!((r.objective - 1.0).abs() < 1e-7);
    }

    #[test]
    fn agrees_with_frank_wolfe_on_small_problem() {
        let n = NominalStackedNoise::centered(
            PsdMatrix::from_diagonal(&[0.4, 0.3]).unwrap(),
            PsdMatrix::from_diagonal(&[0.5]).unwrap(),
        )
        .unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let p = build_stage_problem(Some(&a), &c, Some(&PsdMatrix::identity(2)), &n, 0.3, false).unwrap();
        let fw = solve_stage_sdp(&p, 1e-9, 5000).unwrap();
        let ip = solve_stage_sdp_barrier(&p, BarrierOptions::default()).unwrap();
        assert!((fw.objective - ip.objective).abs() < 1e-5, "{} vs {}", fw.objective, ip.objective);
        assert!(verify_solution(&p, &ip, 1e-6).all_ok());
    }

    #[test]
    fn rejects_zero_radius() {
        let n = NominalStackedNoise::centered(
            PsdMatrix::from_diagonal(&[1.0]).unwrap(),
            PsdMatrix::from_diagonal(&[1.0]).unwrap(),
        )
        .unwrap();
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = build_stage_problem(None, &one, None, &n, 0.0, true).unwrap();
        assert!(solve_stage_sdp_barrier(&p, BarrierOptions::default()).is_err());
    }
}
