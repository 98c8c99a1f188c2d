//! JSON dump of stage SDP problems and solutions, and the offline verifier
//! behind `drekf verify-sdp`.

use std::path::Path;

use drekf_core::ambiguity::NominalStackedNoise;
use drekf_core::psd::{GaussianLaw, PsdMatrix};
use drekf_core::sdp::barrier::{solve_stage_sdp_barrier, BarrierOptions};
use drekf_core::sdp::{
    build_stage_problem, verify_solution, SdpDiagnostics, SolverKind, StageSdpProblem, StageSdpSolution,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// Default absolute tolerance (scaled by magnitudes) for constraint residuals.
pub const VERIFY_TOL: f64 = 1e-8;
/// Allowed objective difference between the stored and the interior-point solution.
pub const CROSS_CHECK_TOL: f64 = 1e-4;

type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(r: &Rows, what: &str) -> Result<DMatrix<f64>, String> {
    let n = r.len();
    let m = r.first().map_or(0, Vec::len);
    if r.iter().any(|row| row.len() != m) {
        return Err(format!("{what}: ragged rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| r[i][j]))
}

fn psd(r: &Rows, what: &str) -> Result<PsdMatrix, String> {
    PsdMatrix::new(matrix(r, what)?).map_err(|e| format!("{what}: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDump {
    pub is_initial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    pub c: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carried_posterior: Option<Rows>,
    pub nominal_first_mean: Vec<f64>,
    pub nominal_first_cov: Rows,
    pub nominal_meas_mean: Vec<f64>,
    pub nominal_meas_cov: Rows,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionDump {
    pub prior_cov: Rows,
    pub posterior_cov: Rows,
    pub stacked_cov: Rows,
    pub first_block: Rows,
    pub meas_block: Rows,
    pub cross_block: Rows,
    pub coupling: Rows,
    pub t_block: Rows,
    pub s_block: Rows,
    pub gain: Rows,
    pub objective: f64,
    pub solver: String,
    pub iterations: usize,
    pub feasibility_residual: f64,
    pub objective_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdpStageDump {
    pub stage: usize,
    pub problem: ProblemDump,
    pub solution: SolutionDump,
}

fn solver_name(k: SolverKind) -> &'static str {
    match k {
        SolverKind::Analytic => "analytic",
        SolverKind::FrankWolfe => "frank_wolfe",
        SolverKind::Barrier => "barrier",
        SolverKind::External => "external",
    }
}

fn solver_kind(s: &str) -> SolverKind {
    match s {
        "analytic" => SolverKind::Analytic,
        "frank_wolfe" => SolverKind::FrankWolfe,
        "barrier" => SolverKind::Barrier,
        _ => SolverKind::External,
    }
}

impl SdpStageDump {
    pub fn new(stage: usize, problem: &StageSdpProblem, solution: &StageSdpSolution) -> Self {
        let nominal = problem.nominal();
        let prop = problem.propagation();
        SdpStageDump {
            stage,
            problem: ProblemDump {
                is_initial: problem.is_initial(),
                a: prop.map(|p| rows(&p.a)),
                c: rows(problem.c()),
                carried_posterior: prop.map(|p| rows(p.carried_posterior.as_matrix())),
                nominal_first_mean: nominal.first_mean().iter().copied().collect(),
                nominal_first_cov: rows(nominal.first_cov().as_matrix()),
                nominal_meas_mean: nominal.meas_mean().iter().copied().collect(),
                nominal_meas_cov: rows(nominal.meas_cov().as_matrix()),
                radius: problem.radius(),
            },
            solution: SolutionDump {
                prior_cov: rows(solution.prior_cov.as_matrix()),
                posterior_cov: rows(solution.posterior_cov.as_matrix()),
                stacked_cov: rows(solution.stacked_cov.as_matrix()),
                first_block: rows(solution.first_block.as_matrix()),
                meas_block: rows(solution.meas_block.as_matrix()),
                cross_block: rows(&solution.cross_block),
                coupling: rows(&solution.coupling),
                t_block: rows(&solution.t_block),
                s_block: rows(&solution.s_block),
                gain: rows(&solution.gain),
                objective: solution.objective,
                solver: solver_name(solution.diagnostics.solver).to_string(),
                iterations: solution.diagnostics.iterations,
                feasibility_residual: solution.diagnostics.feasibility_residual,
                objective_gap: solution.diagnostics.objective_gap,
            },
        }
    }

    pub fn rebuild_problem(&self) -> Result<StageSdpProblem, String> {
        let p = &self.problem;
        let law = |mean: &[f64], cov: &Rows, what: &str| -> Result<GaussianLaw, String> {
            GaussianLaw::new(DVector::from_column_slice(mean), psd(cov, what)?).map_err(|e| format!("{what}: {e}"))
        };
        let nominal = NominalStackedNoise::new(
            &law(&p.nominal_first_mean, &p.nominal_first_cov, "nominal_first_cov")?,
            &law(&p.nominal_meas_mean, &p.nominal_meas_cov, "nominal_meas_cov")?,
        )
        .map_err(|e| format!("nominal: {e}"))?;
        let a = p.a.as_ref().map(|a| matrix(a, "a")).transpose()?;
        let carried = p.carried_posterior.as_ref().map(|m| psd(m, "carried_posterior")).transpose()?;
        build_stage_problem(a.as_ref(), &matrix(&p.c, "c")?, carried.as_ref(), &nominal, p.radius, p.is_initial)
            .map_err(|e| format!("problem: {e}"))
    }

    pub fn rebuild_solution(&self) -> Result<StageSdpSolution, String> {
        let s = &self.solution;
        Ok(StageSdpSolution {
            prior_cov: psd(&s.prior_cov, "prior_cov")?,
            posterior_cov: psd(&s.posterior_cov, "posterior_cov")?,
            stacked_cov: psd(&s.stacked_cov, "stacked_cov")?,
            first_block: psd(&s.first_block, "first_block")?,
            meas_block: psd(&s.meas_block, "meas_block")?,
            cross_block: matrix(&s.cross_block, "cross_block")?,
            coupling: matrix(&s.coupling, "coupling")?,
            t_block: matrix(&s.t_block, "t_block")?,
            s_block: matrix(&s.s_block, "s_block")?,
            gain: matrix(&s.gain, "gain")?,
            objective: s.objective,
            diagnostics: SdpDiagnostics {
                solver: solver_kind(&s.solver),
                iterations: s.iterations,
                feasibility_residual: s.feasibility_residual,
                objective_gap: s.objective_gap,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdpDumpFile {
    pub stages: Vec<SdpStageDump>,
}

pub fn write_dump(path: &Path, stages: &[SdpStageDump]) -> SimResult<()> {
    let file = SdpDumpFile { stages: stages.to_vec() };
    let text = serde_json::to_string_pretty(&file).map_err(|e| SimError::format(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| SimError::io(path, e))
}

pub fn read_dump(path: &Path) -> SimResult<SdpDumpFile> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SimError::format(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub residual: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageVerification {
    pub stage: usize,
    pub checks: Vec<CheckLine>,
}

impl StageVerification {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.ok)
    }
}

/// Verify every constraint of each dumped stage and cross-check the stored
/// objective against an interior-point solve (skipped for a zero radius,
/// whose feasible set has no interior).
pub fn verify_dump(dump: &SdpDumpFile, tol: f64) -> Vec<StageVerification> {
    dump.stages
        .iter()
        .map(|d| {
            let mut checks = Vec::new();
            let rebuilt = d.rebuild_problem().and_then(|p| d.rebuild_solution().map(|s| (p, s)));
            match rebuilt {
                Err(msg) => checks.push(CheckLine { name: format!("parse ({msg})"), residual: f64::INFINITY, ok: false }),
                Ok((problem, solution)) => {
                    let report = verify_solution(&problem, &solution, tol);
                    checks.extend(report.constraints.iter().map(|c| CheckLine {
                        name: c.name.to_string(),
                        residual: c.residual,
                        ok: c.ok,
                    }));
                    if problem.radius() > 0.0 {
                        let line = match solve_stage_sdp_barrier(&problem, BarrierOptions::default()) {
                            Ok(reference) => {
                                let gap = (reference.objective - solution.objective).abs();
                                CheckLine { name: "interior_point_cross_check".into(), residual: gap, ok: gap <= CROSS_CHECK_TOL }
                            }
                            Err(e) => CheckLine {
                                name: format!("interior_point_cross_check ({e})"),
                                residual: f64::INFINITY,
                                ok: false,
                            },
                        };
                        checks.push(line);
                    }
                }
            }
            StageVerification { stage: d.stage, checks }
        })
        .collect()
}
