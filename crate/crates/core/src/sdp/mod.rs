//! Stage-wise distributionally robust MMSE problem.
//!
//! At each stage the adversary picks the stacked-noise covariance Σ_ε inside
//! the Bures ball of radius θ̄ᵉᶠᶠ around Σ̂_ε, and the estimator answers with
//! the linear MMSE gain. The value is `Tr(Σ⁻ − T S⁻¹ Tᵀ)`, concave in Σ_ε.
//!
//! The production path ([`solve_stage_sdp`]) is a Frank–Wolfe method whose
//! linear oracle over the Bures ball has a closed form up to a scalar root.
//! [`barrier::solve_stage_sdp_barrier`] solves the full LMI formulation with a
//! dense log-barrier method and is used to cross-check it.

pub mod barrier;
mod frank_wolfe;

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;

use crate::ambiguity::NominalStackedNoise;
use crate::error::{Error, Result};
use crate::psd::{assemble_blocks, bures_fidelity, min_eigenvalue, spd_inverse, sqrt_psd, symmetrize, PsdMatrix};

pub use frank_wolfe::solve_stage_sdp;

/// Default relative objective tolerance for the first-order solver.
pub const DEFAULT_TOL_OBJ: f64 = 1e-7;
/// Default iteration cap for the first-order solver.
pub const DEFAULT_MAX_ITERS: usize = 5000;

/// Propagation data for stages `t ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagation {
    /// A_{t-1}
    pub a: DMatrix<f64>,
    /// Σ_{x,t-1} carried from the previous stage.
    pub carried_posterior: PsdMatrix,
}

/// One stage of the robust estimation SDP.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSdpProblem {
    propagation: Option<Propagation>,
    c: DMatrix<f64>,
    nominal: NominalStackedNoise,
    radius: f64,
    lambda_floor: f64,
    /// A Σ Aᵀ, or zero at the initial stage.
    prior_offset: DMatrix<f64>,
}

impl StageSdpProblem {
    pub fn n_x(&self) -> usize {
        self.nominal.n_x()
    }

    pub fn n_y(&self) -> usize {
        self.nominal.n_y()
    }

    pub fn is_initial(&self) -> bool {
        self.propagation.is_none()
    }

    pub fn propagation(&self) -> Option<&Propagation> {
        self.propagation.as_ref()
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn nominal(&self) -> &NominalStackedNoise {
        &self.nominal
    }

    /// θ̄ᵉᶠᶠ used for this stage.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn lambda_floor(&self) -> f64 {
        self.lambda_floor
    }

    pub fn prior_offset(&self) -> &DMatrix<f64> {
        &self.prior_offset
    }

    /// Same problem with a different radius.
    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::NegativeInput("radius"));
        }
        let mut p = self.clone();
        p.radius = radius;
        Ok(p)
    }

    /// Prior covariance, cross-covariance T and innovation covariance S for a
    /// candidate stacked covariance.
    pub fn moments(&self, sigma_eps: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (nx, ny) = (self.n_x(), self.n_y());
        let prior = &self.prior_offset + sigma_eps.view((0, 0), (nx, nx));
        let cross = sigma_eps.view((0, nx), (nx, ny)).into_owned();
        let t = &prior * self.c.transpose() + &cross;
        let cw = &self.c * &cross;
        let s = &self.c * &prior * self.c.transpose()
            + sigma_eps.view((nx, nx), (ny, ny))
            + &cw
            + cw.transpose();
        (symmetrize(&prior), t, symmetrize(&s))
    }
}

/// Assemble a stage problem. `a` and `carried_posterior` must both be present
/// for `t ≥ 1` and both absent at the initial stage.
pub fn build_stage_problem(
    a: Option<&DMatrix<f64>>,
    c: &DMatrix<f64>,
    carried_posterior: Option<&PsdMatrix>,
    nominal: &NominalStackedNoise,
    radius: f64,
    is_initial: bool,
) -> Result<StageSdpProblem> {
    let (nx, ny) = (nominal.n_x(), nominal.n_y());
    if !radius.is_finite() {
        return Err(Error::NonFinite("radius"));
    }
    if radius < 0.0 {
        return Err(Error::NegativeInput("radius"));
    }
    if c.nrows() != ny || c.ncols() != nx {
        return Err(Error::DimensionMismatch {
            context: "measurement Jacobian",
            expected: ny * nx,
            found: c.nrows() * c.ncols(),
        });
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement Jacobian"));
    }
    if nominal.lambda_floor() <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: nominal.lambda_floor(),
        });
    }
    let propagation = match (is_initial, a, carried_posterior) {
        (true, None, None) => None,
        (false, Some(a), Some(p)) => {
            if a.nrows() != nx || a.ncols() != nx {
                return Err(Error::DimensionMismatch {
                    context: "dynamics Jacobian",
                    expected: nx * nx,
                    found: a.nrows() * a.ncols(),
                });
            }
            if p.dim() != nx {
                return Err(Error::DimensionMismatch {
                    context: "carried posterior",
                    expected: nx,
                    found: p.dim(),
                });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dynamics Jacobian"));
            }
            Some(Propagation {
                a: a.clone(),
                carried_posterior: p.clone(),
            })
        }
        _ => {
            return Err(Error::InvalidConfig(String::from(
                "propagation data must be given exactly for non-initial stages",
            )))
        }
    };
    let prior_offset = match &propagation {
        Some(p) => symmetrize(&(&p.a * p.carried_posterior.as_matrix() * p.a.transpose())),
        None => DMatrix::zeros(nx, nx),
    };
    Ok(StageSdpProblem {
        propagation,
        c: c.clone(),
        nominal: nominal.clone(),
        radius,
        lambda_floor: nominal.lambda_floor(),
        prior_offset,
    })
}

/// Which algorithm produced a solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    /// θ̄ᵉᶠᶠ = 0: the ball is a point, closed-form Kalman update.
    Analytic,
    FrankWolfe,
    Barrier,
    /// Assembled from a user-supplied stacked covariance (audits, oracles).
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdpDiagnostics {
    pub solver: SolverKind,
    pub iterations: usize,
    /// Largest violation among Bures-ball and eigenvalue-floor constraints.
    pub feasibility_residual: f64,
    /// Upper bound on the distance to the optimal objective (Frank–Wolfe gap
    /// or barrier duality gap).
    pub objective_gap: f64,
}

/// Least-favorable covariance blocks, robust gain and posterior covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSdpSolution {
    /// Σ⁻_{x,t}
    pub prior_cov: PsdMatrix,
    /// Σ*_{x,t}
    pub posterior_cov: PsdMatrix,
    /// Σ*_ε, the full least-favorable stacked covariance.
    pub stacked_cov: PsdMatrix,
    /// Σ*_{w,t-1}, or Σ*⁻_{x,0} at the initial stage.
    pub first_block: PsdMatrix,
    /// Σ*_{v,t}
    pub meas_block: PsdMatrix,
    /// Σ*_{wv,t-1} (Σ*_{xv,0} at the initial stage).
    pub cross_block: DMatrix<f64>,
    /// Bures coupling slack Z_t.
    pub coupling: DMatrix<f64>,
    pub t_block: DMatrix<f64>,
    pub s_block: DMatrix<f64>,
    /// K*_t = T S⁻¹
    pub gain: DMatrix<f64>,
    /// Tr(Σ*_{x,t})
    pub objective: f64,
    pub diagnostics: SdpDiagnostics,
}

impl StageSdpSolution {
    /// Build the full solution record from a stacked covariance: gain, tight
    /// posterior `Σ⁻ − T S⁻¹ Tᵀ`, and the transported Bures coupling.
    pub fn from_stacked_cov(
        problem: &StageSdpProblem,
        sigma_eps: &DMatrix<f64>,
        diagnostics: SdpDiagnostics,
    ) -> Result<Self> {
        let (nx, ny) = (problem.n_x(), problem.n_y());
        if sigma_eps.nrows() != nx + ny || sigma_eps.ncols() != nx + ny {
            return Err(Error::DimensionMismatch {
                context: "stacked covariance",
                expected: nx + ny,
                found: sigma_eps.nrows(),
            });
        }
        let sigma_eps = symmetrize(sigma_eps);
        let (prior, t, s) = problem.moments(&sigma_eps);
        let s_inv = spd_inverse(&s).ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(&s),
        })?;
        let gain = &t * &s_inv;
        let posterior = symmetrize(&(&prior - &gain * t.transpose()));
        let coupling = transported_coupling(problem.nominal().cov(), &sigma_eps);
        let objective = posterior.trace();
        Ok(StageSdpSolution {
            prior_cov: PsdMatrix::new(prior)?,
            posterior_cov: PsdMatrix::new(posterior)?,
            first_block: PsdMatrix::new(sigma_eps.view((0, 0), (nx, nx)).into_owned())?,
            meas_block: PsdMatrix::new(sigma_eps.view((nx, nx), (ny, ny)).into_owned())?,
            cross_block: sigma_eps.view((0, nx), (nx, ny)).into_owned(),
            stacked_cov: PsdMatrix::new(sigma_eps)?,
            coupling,
            t_block: t,
            s_block: s,
            gain,
            objective,
            diagnostics,
        })
    }
}

/// Optimal Bures coupling `Z = Σ̂^{1/2} (Σ̂^{1/2} Σ Σ̂^{1/2})^{1/2} Σ̂^{-1/2}`,
/// which makes `[[Σ̂, Z], [Zᵀ, Σ]] ⪰ 0` tight with `Tr Z` maximal.
pub fn transported_coupling(nominal: &DMatrix<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let root = sqrt_psd(nominal);
    let root_inv = crate::psd::sym_apply(nominal, |l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt());
    let inner = sqrt_psd(&(&root * sigma * &root));
    &root * inner * root_inv
}

/// Closed-form solution for a zero radius: the Kalman update under the nominal law.
pub fn kalman_solution(problem: &StageSdpProblem) -> Result<StageSdpSolution> {
    let nominal = problem.nominal().cov().clone();
    StageSdpSolution::from_stacked_cov(
        problem,
        &nominal,
        SdpDiagnostics {
            solver: SolverKind::Analytic,
            iterations: 0,
            feasibility_residual: 0.0,
            objective_gap: 0.0,
        },
    )
}

/// Bures-ball and eigenvalue-floor violation of a candidate stacked covariance.
pub(crate) fn feasibility_residual(problem: &StageSdpProblem, sigma_eps: &DMatrix<f64>) -> f64 {
    let nominal = problem.nominal().cov();
    let b2 = (sigma_eps.trace() + nominal.trace() - 2.0 * bures_fidelity(sigma_eps, nominal)).max(0.0);
    let ball = (b2.sqrt() - problem.radius()).max(0.0);
    let floor = (problem.lambda_floor() - min_eigenvalue(sigma_eps)).max(0.0);
    ball.max(floor)
}

/// One audited constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintResidual {
    pub name: &'static str,
    /// Violation amount; ≤ 0 or tiny means satisfied.
    pub residual: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub constraints: Vec<ConstraintResidual>,
}

impl VerificationReport {
    pub fn all_ok(&self) -> bool {
        self.constraints.iter().all(|c| c.ok)
    }

    pub fn violations(&self) -> impl Iterator<Item = &ConstraintResidual> {
        self.constraints.iter().filter(|c| !c.ok)
    }

    pub fn get(&self, name: &str) -> Option<&ConstraintResidual> {
        self.constraints.iter().find(|c| c.name == name)
    }
}

/// Independent audit of every constraint of the stage SDP for a claimed
/// solution. Residuals are absolute; `tol` is scaled by the magnitude of the
/// quantities involved (`tol·max(1, ‖·‖)`).
pub fn verify_solution(problem: &StageSdpProblem, solution: &StageSdpSolution, tol: f64) -> VerificationReport {
    let (nx, ny) = (problem.n_x(), problem.n_y());
    let mut out = Vec::new();
    let mut push = |name: &'static str, residual: f64, scale: f64| {
        let ok = residual.is_finite() && residual <= tol * scale.max(1.0);
        out.push(ConstraintResidual { name, residual, ok });
    };

    let dims_ok = solution.stacked_cov.dim() == nx + ny
        && solution.posterior_cov.dim() == nx
        && solution.prior_cov.dim() == nx
        && solution.gain.nrows() == nx
        && solution.gain.ncols() == ny;
    push("dimensions", if dims_ok { 0.0 } else { f64::INFINITY }, 1.0);
    if !dims_ok {
        return VerificationReport { constraints: out };
    }

    let sigma_eps = solution.stacked_cov.as_matrix();
    let nominal = problem.nominal().cov();
    let prior = solution.prior_cov.as_matrix();
    let post = solution.posterior_cov.as_matrix();

    // Σ_ε blocks consistent with the reported sub-blocks.
    let blocks = (sigma_eps.view((0, 0), (nx, nx)) - solution.first_block.as_matrix()).norm()
        + (sigma_eps.view((nx, nx), (ny, ny)) - solution.meas_block.as_matrix()).norm()
        + (sigma_eps.view((0, nx), (nx, ny)) - &solution.cross_block).norm();
    push("stacked_blocks", blocks, sigma_eps.norm());

    let expected_prior = problem.prior_offset() + sigma_eps.view((0, 0), (nx, nx));
    push("propagation", (prior - &expected_prior).norm(), expected_prior.norm());

    let (_, t, s) = problem.moments(sigma_eps);
    let ts = (&t - &solution.t_block).norm() + (&s - &solution.s_block).norm();
    push("t_s_blocks", ts, s.norm() + t.norm());

    let s_min = min_eigenvalue(&s);
    push("innovation_pd", if s_min > 0.0 { 0.0 } else { -s_min + f64::MIN_POSITIVE }, 1.0);

    let gain_res = (&solution.gain * &s - &t).norm();
    push("gain_consistency", gain_res, t.norm());

    let schur = assemble_blocks(&(prior - post), &t, &s);
    push("schur_lmi", (-min_eigenvalue(&schur)).max(0.0), schur.norm());

    let bures_lmi = assemble_blocks(nominal, &solution.coupling, sigma_eps);
    push("bures_lmi", (-min_eigenvalue(&bures_lmi)).max(0.0), bures_lmi.norm());

    let trace_gap = sigma_eps.trace() + nominal.trace() - 2.0 * solution.coupling.trace()
        - problem.radius() * problem.radius();
    push("bures_trace", trace_gap.max(0.0), nominal.trace());

    push(
        "eigenvalue_floor",
        (problem.lambda_floor() - min_eigenvalue(sigma_eps)).max(0.0),
        problem.lambda_floor(),
    );

    push("posterior_psd", (-min_eigenvalue(post)).max(0.0), post.norm());

    push("objective", (post.trace() - solution.objective).abs(), solution.objective.abs());

    VerificationReport { constraints: out }
}

/// Objective of the stage problem for a given stacked covariance (no checks).
pub fn stage_objective(problem: &StageSdpProblem, sigma_eps: &DMatrix<f64>) -> Option<f64> {
    let (prior, t, s) = problem.moments(sigma_eps);
    let s_inv = spd_inverse(&s)?;
    Some(prior.trace() - (&t * s_inv * t.transpose()).trace())
}
