//! Uncertainty-aware receding-horizon control of the unicycle with a
//! covariance-driven obstacle inflation, and the closed loop that couples it
//! to an estimator and a noisy plant.
//!
//! The nonconvex program is solved by sequential convexification: dynamics
//! are linearized around the current control sequence, each disc obstacle is
//! replaced by its supporting half-plane, and the resulting QP (with a
//! trust region and penalized slacks) is solved by [`qp::solve_qp`].

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::Estimator;
use crate::psd::{sym_apply, GaussianSampler, PsdMatrix};
use crate::systems::{unicycle_dynamics, NonlinearSystem, UnicycleState};

pub mod qp;

/// Penalty per unit of obstacle-constraint violation.
pub const SLACK_PENALTY: f64 = 1e4;
pub const MAX_OUTER_ITERS: usize = 30;
/// Outer iterations stop once the control update falls below this (∞-norm).
pub const CONTROL_TOL: f64 = 1e-4;
/// Clearance tolerance for declaring a solution feasible.
pub const CLEARANCE_TOL: f64 = 1e-6;

/// Extra clearance the solver plans with so that converged iterates satisfy
/// the inflated constraint despite linearization error.
const LINEARIZATION_BACKOFF: f64 = 1e-3;
const INITIAL_TRUST: f64 = 1.0;
const MAX_TRUST: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        distance(p, self.center) < self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub q: f64,
    pub r_s: f64,
    pub r_omega: f64,
    pub q_f: f64,
    pub s_max: f64,
    pub omega_max: f64,
    pub goal: [f64; 2],
    pub obstacles: Vec<Obstacle>,
    pub kappa_sigma: f64,
    pub d_min_base: f64,
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.horizon == 0 {
            return invalid("mpc horizon must be at least 1");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid("mpc dt must be positive");
        }
        if !(self.s_max > 0.0 && self.omega_max > 0.0) {
            return invalid("mpc input limits must be positive");
        }
        for w in [self.q, self.r_s, self.r_omega, self.q_f, self.kappa_sigma, self.d_min_base] {
            if !(w >= 0.0 && w.is_finite()) {
                return invalid("mpc weights, kappa_sigma and d_min_base must be nonnegative");
            }
        }
        if self.obstacles.iter().any(|o| !(o.radius > 0.0 && o.radius.is_finite())) {
            return invalid("obstacle radius must be positive");
        }
        if !self.goal.iter().chain(self.obstacles.iter().flat_map(|o| o.center.iter())).all(|v| v.is_finite()) {
            return invalid("mpc goal and obstacle centers must be finite");
        }
        Ok(())
    }

    /// Index of the first obstacle containing `p` (uninflated discs).
    pub fn collision(&self, p: [f64; 2]) -> Option<usize> {
        self.obstacles.iter().position(|o| o.contains(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpcStatus {
    Optimal,
    MaxIter,
    InfeasibleRelaxed,
}

impl MpcStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            MpcStatus::Optimal => "optimal",
            MpcStatus::MaxIter => "max_iter",
            MpcStatus::InfeasibleRelaxed => "infeasible_relaxed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    /// `(s, ω)` for k = 0..N−1.
    pub controls: Vec<[f64; 2]>,
    /// Predicted states for k = 0..N; index 0 is the estimate.
    pub predicted: Vec<UnicycleState>,
    pub status: MpcStatus,
    /// Objective of the original program (without slack penalty).
    pub cost: f64,
    /// Largest inflated-clearance violation over k = 1..N (0 if feasible).
    pub max_violation: f64,
    pub iterations: usize,
}

impl MpcSolution {
    pub fn first_control(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.controls[0])
    }

    /// Smallest `‖p_k − c‖ − r` over predicted k = 1..N and obstacles.
    pub fn min_clearance(&self, obstacles: &[Obstacle]) -> f64 {
        self.predicted[1..]
            .iter()
            .flat_map(|x| obstacles.iter().map(move |o| distance([x.px, x.py], o.center) - o.radius))
            .fold(f64::INFINITY, f64::min)
    }
}

/// `δ = κ_σ sqrt(Tr Σ_p)` with `Σ_p` the leading 2×2 position block.
pub fn safety_margin(posterior_cov: &PsdMatrix, kappa_sigma: f64) -> Result<f64> {
    if posterior_cov.dim() < 2 {
        return Err(Error::DimensionMismatch { context: "safety margin covariance", expected: 2, found: posterior_cov.dim() });
    }
    if !(kappa_sigma >= 0.0) {
        return Err(Error::NegativeInput("kappa_sigma"));
    }
    let m = posterior_cov.as_matrix();
    Ok(kappa_sigma * (m[(0, 0)] + m[(1, 1)]).max(0.0).sqrt())
}

/// Cold-start solve of the receding-horizon problem from `estimate`.
pub fn solve_mpc(estimate: &DVector<f64>, delta: f64, config: &MpcConfig) -> Result<MpcSolution> {
    let guess = vec![[0.5 * config.s_max, 0.0]; config.horizon];
    solve_from(estimate, delta, config, guess)
}

/// Receding-horizon controller that warm-starts from its previous solution
/// shifted by one stage.
#[derive(Clone, Debug)]
pub struct MpcController {
    config: MpcConfig,
    previous: Option<Vec<[f64; 2]>>,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Result<Self> {
        config.validate()?;
        Ok(MpcController { config, previous: None })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.config
    }

    pub fn solve(&mut self, estimate: &DVector<f64>, delta: f64) -> Result<MpcSolution> {
        let guess = match &self.previous {
            Some(prev) => {
                let mut g: Vec<[f64; 2]> = prev[1..].to_vec();
                g.push(*prev.last().unwrap_or(&[0.0, 0.0]));
                g
            }
            None => vec![[0.5 * self.config.s_max, 0.0]; self.config.horizon],
        };
        let sol = solve_from(estimate, delta, &self.config, guess)?;
        self.previous = Some(sol.controls.clone());
        Ok(sol)
    }
}

fn solve_from(estimate: &DVector<f64>, delta: f64, config: &MpcConfig, guess: Vec<[f64; 2]>) -> Result<MpcSolution> {
    config.validate()?;
    if estimate.len() != 3 {
        return Err(Error::DimensionMismatch { context: "mpc estimate", expected: 3, found: estimate.len() });
    }
    if !estimate.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("mpc estimate"));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::NegativeInput("safety margin"));
    }
    let x0 = UnicycleState::from_vector(estimate);
    let n = config.horizon;
    let mut u: Vec<[f64; 2]> = guess.into_iter().map(|c| clamp_control(c, config)).collect();
    let mut trust = INITIAL_TRUST;
    let mut converged = false;
    let mut iterations = 0;
    let mut traj = rollout(&x0, &u, config.dt);
    let mut merit = merit_value(&traj, &u, delta, config);

    while iterations < MAX_OUTER_ITERS {
        iterations += 1;
        let (du, model_reduction) = convex_step(&traj, &u, delta, trust, config)?;
        let step = du.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if step < CONTROL_TOL || model_reduction <= 1e-12 * (1.0 + merit.abs()) {
            converged = true;
            break;
        }
        let candidate: Vec<[f64; 2]> = (0..n)
            .map(|k| clamp_control([u[k][0] + du[2 * k], u[k][1] + du[2 * k + 1]], config))
            .collect();
        let cand_traj = rollout(&x0, &candidate, config.dt);
        let cand_merit = merit_value(&cand_traj, &candidate, delta, config);
        let ratio = (merit - cand_merit) / model_reduction;
        if ratio >= 0.1 {
            u = candidate;
            traj = cand_traj;
            merit = cand_merit;
            if ratio > 0.75 && step >= 0.99 * trust {
                trust = (2.0 * trust).min(MAX_TRUST);
            }
        }
        if ratio < 0.25 {
            trust *= 0.5;
            if trust < CONTROL_TOL {
                converged = true;
                break;
            }
        }
    }

    let max_violation = violation(&traj, delta, config);
    let status = if max_violation > CLEARANCE_TOL {
        MpcStatus::InfeasibleRelaxed
    } else if converged {
        MpcStatus::Optimal
    } else {
        MpcStatus::MaxIter
    };
    Ok(MpcSolution { cost: cost_value(&traj, &u, config), controls: u, predicted: traj, status, max_violation, iterations })
}

fn clamp_control(c: [f64; 2], config: &MpcConfig) -> [f64; 2] {
    [c[0].clamp(0.0, config.s_max), c[1].clamp(-config.omega_max, config.omega_max)]
}

fn rollout(x0: &UnicycleState, u: &[[f64; 2]], dt: f64) -> Vec<UnicycleState> {
    let mut traj = Vec::with_capacity(u.len() + 1);
    traj.push(*x0);
    for c in u {
        let next = unicycle_dynamics(traj.last().unwrap(), c[0], c[1], dt);
        traj.push(next);
    }
    traj
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn goal_sq(x: &UnicycleState, goal: [f64; 2]) -> f64 {
    (x.px - goal[0]).powi(2) + (x.py - goal[1]).powi(2)
}

fn cost_value(traj: &[UnicycleState], u: &[[f64; 2]], config: &MpcConfig) -> f64 {
    let n = u.len();
    let running: f64 = (0..n)
        .map(|k| config.q * goal_sq(&traj[k], config.goal) + config.r_s * u[k][0].powi(2) + config.r_omega * u[k][1].powi(2))
        .sum();
    running + config.q_f * goal_sq(&traj[n], config.goal)
}

fn inflated_radius(o: &Obstacle, delta: f64, config: &MpcConfig) -> f64 {
    o.radius + config.d_min_base + delta
}

fn violation(traj: &[UnicycleState], delta: f64, config: &MpcConfig) -> f64 {
    traj[1..]
        .iter()
        .flat_map(|x| config.obstacles.iter().map(move |o| inflated_radius(o, delta, config) - distance([x.px, x.py], o.center)))
        .fold(0.0, f64::max)
}

fn merit_value(traj: &[UnicycleState], u: &[[f64; 2]], delta: f64, config: &MpcConfig) -> f64 {
    let penalty: f64 = traj[1..]
        .iter()
        .flat_map(|x| {
            config
                .obstacles
                .iter()
                .map(move |o| (inflated_radius(o, delta, config) + LINEARIZATION_BACKOFF - distance([x.px, x.py], o.center)).max(0.0))
        })
        .sum();
    cost_value(traj, u, config) + SLACK_PENALTY * penalty
}

/// Position sensitivities `∂p_k/∂u` (2 × 2N) for k = 0..N.
fn position_sensitivities(traj: &[UnicycleState], u: &[[f64; 2]], dt: f64) -> Vec<DMatrix<f64>> {
    let n = u.len();
    let mut sens = DMatrix::<f64>::zeros(3, 2 * n);
    let mut out = Vec::with_capacity(n + 1);
    out.push(sens.rows(0, 2).into_owned());
    for k in 0..n {
        let x = &traj[k];
        let (sp, cp) = x.psi.sin_cos();
        let s = u[k][0];
        let heading_row = sens.row(2).into_owned();
        let mut row0 = sens.row(0) - heading_row.clone() * (s * sp * dt);
        let mut row1 = sens.row(1) + heading_row * (s * cp * dt);
        row0[2 * k] += cp * dt;
        row1[2 * k] += sp * dt;
        sens.set_row(0, &row0);
        sens.set_row(1, &row1);
        sens[(2, 2 * k + 1)] += dt;
        out.push(sens.rows(0, 2).into_owned());
    }
    out
}

/// Second-order dynamics term `Σ_k 2w_k Σ_i r_{k,i} ∇²p_{k,i}` of the cost
/// Hessian in `u` (the Gauss–Newton part is built separately). Uses the
/// closed form `p_k = p_0 + Σ_{j<k} s_j Δt (cos ψ_j, sin ψ_j)`.
fn residual_curvature(traj: &[UnicycleState], u: &[[f64; 2]], config: &MpcConfig) -> DMatrix<f64> {
    let n = u.len();
    let dt = config.dt;
    // weighted residual suffix sums: tail[j] = Σ_{k>j} 2 w_k r_k
    let mut tail = vec![[0.0; 2]; n + 1];
    for k in (1..=n).rev() {
        let w = if k == n { config.q_f } else { config.q };
        let r = [traj[k].px - config.goal[0], traj[k].py - config.goal[1]];
        tail[k - 1] = [tail[k][0] + 2.0 * w * r[0], tail[k][1] + 2.0 * w * r[1]];
    }
    let mut out = DMatrix::<f64>::zeros(2 * n, 2 * n);
    // omega_tail[m] = Σ_{j>m} −s_j Δt³ (R_j · c_j)
    let mut omega_tail = vec![0.0; n + 1];
    for j in (0..n).rev() {
        let (sp, cp) = traj[j].psi.sin_cos();
        let rj = tail[j];
        let cross = dt * dt * (rj[1] * cp - rj[0] * sp);
        for l in 0..j {
            out[(2 * j, 2 * l + 1)] += cross;
            out[(2 * l + 1, 2 * j)] += cross;
        }
        let a_next = if j + 1 < n {
            let (spn, cpn) = traj[j + 1].psi.sin_cos();
            let rn = tail[j + 1];
            -u[j + 1][0] * dt.powi(3) * (rn[0] * cpn + rn[1] * spn)
        } else {
            0.0
        };
        omega_tail[j] = omega_tail[j + 1] + a_next;
    }
    for l in 0..n {
        for m in 0..n {
            out[(2 * l + 1, 2 * m + 1)] += omega_tail[l.max(m)];
        }
    }
    out
}

/// Solves the convexified subproblem; returns the control update and the
/// merit reduction predicted by the model.
fn convex_step(traj: &[UnicycleState], u: &[[f64; 2]], delta: f64, trust: f64, config: &MpcConfig) -> Result<(Vec<f64>, f64)> {
    let n = u.len();
    let nu = 2 * n;
    let n_obs = config.obstacles.len();
    let n_slack = n * n_obs;
    let nv = nu + n_slack;
    let sens = position_sensitivities(traj, u, config.dt);

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut g = DVector::<f64>::zeros(nv);
    for (k, j) in sens.iter().enumerate() {
        let w = if k == n { config.q_f } else { config.q };
        if w == 0.0 || k == 0 {
            continue;
        }
        let r = DVector::from_vec(vec![traj[k].px - config.goal[0], traj[k].py - config.goal[1]]);
        let jt = j.transpose();
        let mut hv = h.view_mut((0, 0), (nu, nu));
        hv += &jt * j * (2.0 * w);
        let mut gv = g.rows_mut(0, nu);
        gv += &jt * r * (2.0 * w);
    }
    for k in 0..n {
        h[(2 * k, 2 * k)] += 2.0 * config.r_s;
        h[(2 * k + 1, 2 * k + 1)] += 2.0 * config.r_omega;
        g[2 * k] += 2.0 * config.r_s * u[k][0];
        g[2 * k + 1] += 2.0 * config.r_omega * u[k][1];
    }
    let exact = h.view((0, 0), (nu, nu)) + residual_curvature(traj, u, config);
    h.view_mut((0, 0), (nu, nu)).copy_from(&sym_apply(&exact, |l| l.max(0.0)));
    for i in 0..n_slack {
        g[nu + i] = SLACK_PENALTY;
    }

    let m = 2 * nu + 2 * n_slack;
    let mut a = DMatrix::<f64>::zeros(m, nv);
    let mut b = DVector::<f64>::zeros(m);
    let mut row = 0;
    for k in 0..n {
        let bounds = [(0.0, config.s_max), (-config.omega_max, config.omega_max)];
        for (c, (lo, hi)) in bounds.into_iter().enumerate() {
            let i = 2 * k + c;
            a[(row, i)] = 1.0;
            b[row] = (hi - u[k][c]).min(trust);
            a[(row + 1, i)] = -1.0;
            b[row + 1] = (u[k][c] - lo).min(trust);
            row += 2;
        }
    }
    let mut lin_violation = Vec::with_capacity(n_slack);
    for k in 1..=n {
        let p = [traj[k].px, traj[k].py];
        for (oi, o) in config.obstacles.iter().enumerate() {
            let d = distance(p, o.center);
            let normal = if d > 1e-12 { [(p[0] - o.center[0]) / d, (p[1] - o.center[1]) / d] } else { [0.0, 1.0] };
            let nj = sens[k].row(0) * normal[0] + sens[k].row(1) * normal[1];
            let slack = nu + (k - 1) * n_obs + oi;
            for c in 0..nu {
                a[(row, c)] = -nj[c];
            }
            a[(row, slack)] = -1.0;
            let offset = normal[0] * (p[0] - o.center[0]) + normal[1] * (p[1] - o.center[1]);
            b[row] = offset - inflated_radius(o, delta, config) - LINEARIZATION_BACKOFF;
            a[(row + 1, slack)] = -1.0;
            row += 2;
            lin_violation.push((nj.transpose(), inflated_radius(o, delta, config) + LINEARIZATION_BACKOFF - offset));
        }
    }

    let sol = qp::solve_qp(&h, &g, &a, &b)?;
    #[cfg(test)] { }
    let du = sol.x.rows(0, nu).into_owned();
    let quad = 0.5 * du.dot(&(h.view((0, 0), (nu, nu)) * &du)) + g.rows(0, nu).dot(&du);
    let penalty_before: f64 = lin_violation.iter().map(|(_, v)| v.max(0.0)).sum();
    let penalty_after: f64 = lin_violation.iter().map(|(nj, v)| (v - nj.dot(&du)).max(0.0)).sum();
    let reduction = -quad + SLACK_PENALTY * (penalty_before - penalty_after);
    Ok((du.iter().copied().collect(), reduction))
}

/// Outcome of one closed-loop stage.
#[derive(Clone, Debug)]
pub struct RolloutStep {
    pub next_state: DVector<f64>,
    pub control: DVector<f64>,
    /// Safety margin used for planning at this stage.
    pub margin: f64,
    pub status: MpcStatus,
    /// The plant is inside an (uninflated) obstacle at the current or next stage.
    pub collision: bool,
}

/// True plant: system dynamics plus sampled process and measurement noise.
pub struct Plant<'a, S: NonlinearSystem + ?Sized> {
    pub system: &'a S,
    pub process: GaussianSampler,
    pub measurement: GaussianSampler,
}

impl<S: NonlinearSystem + ?Sized> Plant<'_, S> {
    pub fn step<R: Rng + ?Sized>(&self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mut next = self.system.dynamics(x, u) + self.process.sample(rng);
        self.system.normalize_state(&mut next);
        next
    }

    pub fn observe<R: Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        Ok(self.system.measure(x)? + self.measurement.sample(rng))
    }
}

/// One closed-loop stage: plan from the estimator's latest posterior, apply
/// the first control to the plant, and feed the next measurement back.
/// The estimator must already have consumed the current measurement.
pub fn mpc_rollout_step<S, E, R>(
    plant_state: &DVector<f64>,
    plant: &Plant<'_, S>,
    estimator: &mut E,
    controller: &mut MpcController,
    rng: &mut R,
) -> Result<RolloutStep>
where
    S: NonlinearSystem + ?Sized,
    E: Estimator + ?Sized,
    R: Rng + ?Sized,
{
    let posterior = estimator
        .last_state()
        .filter(|s| s.stage == estimator.stage())
        .ok_or(Error::CallOrder("estimator has not consumed the current measurement"))?;
    let margin = safety_margin(&posterior.posterior_cov, controller.config.kappa_sigma)?;
    let estimate = posterior.posterior_mean.clone();
    let plan = controller.solve(&estimate, margin)?;
    let control = plan.first_control();

    estimator.predict(&control)?;
    let next_state = plant.step(plant_state, &control, rng);
    let y = plant.observe(&next_state, rng)?;
    estimator.update(&y)?;

    let config = &controller.config;
    let collision = config.collision([plant_state[0], plant_state[1]]).is_some()
        || config.collision([next_state[0], next_state[1]]).is_some();
    Ok(RolloutStep { next_state, control, margin, status: plan.status, collision })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn config(obstacles: Vec<Obstacle>) -> MpcConfig {
        MpcConfig {
            horizon: 12,
            dt: 0.2,
            q: 5.0,
            r_s: 0.5,
            r_omega: 0.5,
            q_f: 20.0,
            s_max: 1.5,
            omega_max: 2.0,
            goal: [6.0, 0.0],
            obstacles,
            kappa_sigma: 1.645,
            d_min_base: 0.0,
        }
    }

    #[test]
    fn margin_values() {
        assert_eq!(safety_margin(&PsdMatrix::zeros(3), 1.645).unwrap(), 0.0);
        let cov = PsdMatrix::from_diagonal(&[0.01, 0.01, 0.5]).unwrap();
        assert_abs_diff_eq!(safety_margin(&cov, 1.645).unwrap(), 0.232638, epsilon = 1e-6);
        assert!(safety_margin(&PsdMatrix::identity(1), 1.0).is_err());
    }

    #[test]
    fn at_goal_stays_put() {
        let mut cfg = config(Vec::new());
        cfg.goal = [1.0, 2.0];
        let sol = solve_mpc(&DVector::from_vec(vec![1.0, 2.0, 0.3]), 0.0, &cfg).unwrap();
        assert!(sol.controls.iter().all(|c| c[0].hypot(c[1]) <= 1e-3), "{:?}", sol.controls);
    }

    #[test]
    fn goal_ahead_drives_straight() {
        let sol = solve_mpc(&DVector::from_vec(vec![0.0, 0.0, 0.0]), 0.0, &config(Vec::new())).unwrap();
        assert!(sol.controls[0][0] > 0.0);
        assert!(sol.controls[0][1].abs() <= 1e-3);
        assert_eq!(sol.status, MpcStatus::Optimal);
    }

    #[test]
    fn margin_increases_clearance() {
        let obstacles = vec![Obstacle { center: [2.5, 0.1], radius: 0.8 }];
        let cfg = config(obstacles.clone());
        let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let tight = solve_mpc(&x0, 0.0, &cfg).unwrap();
        let wide = solve_mpc(&x0, 0.5, &cfg).unwrap();
        assert_eq!(tight.status, MpcStatus::Optimal);
        assert_eq!(wide.status, MpcStatus::Optimal);
        assert!(wide.min_clearance(&obstacles) - tight.min_clearance(&obstacles) >= 0.4);
    }

    #[test]
    fn start_inside_inflated_obstacle_is_relaxed() {
        let cfg = config(vec![Obstacle { center: [0.2, 0.0], radius: 1.0 }]);
        let sol = solve_mpc(&DVector::from_vec(vec![0.0, 0.0, 0.0]), 0.2, &cfg).unwrap();
        assert_eq!(sol.status, MpcStatus::InfeasibleRelaxed);
        assert!(sol.max_violation > 0.0);
    }

    #[test]
    fn predicted_states_follow_dynamics() {
        let cfg = config(vec![Obstacle { center: [3.0, -0.2], radius: 1.0 }]);
        let sol = solve_mpc(&DVector::from_vec(vec![0.0, 0.0, 0.1]), 0.3, &cfg).unwrap();
        for k in 0..cfg.horizon {
            let c = sol.controls[k];
            assert_eq!(unicycle_dynamics(&sol.predicted[k], c[0], c[1], cfg.dt), sol.predicted[k + 1]);
            assert!((0.0..=cfg.s_max).contains(&c[0]) && c[1].abs() <= cfg.omega_max);
        }
    }

    #[test]
    fn curvature_matches_finite_difference_hessian() {
        let cfg = config(Vec::new());
        let x0 = UnicycleState { px: 0.3, py: -0.2, psi: 0.7 };
        let u = vec![[0.8, 0.3], [1.1, -0.5], [0.4, 1.2], [0.9, 0.1]];
        let mut cfg4 = cfg.clone();
        cfg4.horizon = 4;
        let grad = |u: &[[f64; 2]]| {
            let traj = rollout(&x0, u, cfg4.dt);
            let sens = position_sensitivities(&traj, u, cfg4.dt);
            let mut g = DVector::<f64>::zeros(8);
            for k in 1..=4 {
                let w = if k == 4 { cfg4.q_f } else { cfg4.q };
                let r = DVector::from_vec(vec![traj[k].px - cfg4.goal[0], traj[k].py - cfg4.goal[1]]);
                g += sens[k].transpose() * r * (2.0 * w);
            }
            g
        };
        let traj = rollout(&x0, &u, cfg4.dt);
        let sens = position_sensitivities(&traj, &u, cfg4.dt);
        let mut gn = DMatrix::<f64>::zeros(8, 8);
        for k in 1..=4 {
            let w = if k == 4 { cfg4.q_f } else { cfg4.q };
            gn += sens[k].transpose() * &sens[k] * (2.0 * w);
        }
        let full = gn + residual_curvature(&traj, &u, &cfg4);
        let h = 1e-6;
        for j in 0..8 {
            let mut up = u.clone();
            up[j / 2][j % 2] += h;
            let mut dn = u.clone();
            dn[j / 2][j % 2] -= h;
            let col = (grad(&up) - grad(&dn)) / (2.0 * h);
            for i in 0..8 {
                assert_abs_diff_eq!(full[(i, j)], col[i], epsilon = 1e-5 * (1.0 + col[i].abs()));
            }
        }
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let x0 = UnicycleState { px: 0.3, py: -0.2, psi: 0.7 };
        let u = vec![[0.8, 0.3], [1.1, -0.5], [0.4, 1.2]];
        let traj = rollout(&x0, &u, 0.2);
        let sens = position_sensitivities(&traj, &u, 0.2);
        let h = 1e-6;
        for j in 0..6 {
            let mut up = u.clone();
            up[j / 2][j % 2] += h;
            let mut dn = u.clone();
            dn[j / 2][j % 2] -= h;
            let (tp, td) = (rollout(&x0, &up, 0.2), rollout(&x0, &dn, 0.2));
            for k in 0..=3 {
                assert_abs_diff_eq!(sens[k][(0, j)], (tp[k].px - td[k].px) / (2.0 * h), epsilon = 1e-7);
                assert_abs_diff_eq!(sens[k][(1, j)], (tp[k].py - td[k].py) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }
}
