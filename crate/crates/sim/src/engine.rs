//! Monte Carlo engine: open-loop estimation runs with common random numbers
//! and closed-loop MPC rollouts, parallel over runs.

use drekf_core::filter::{drekf_init, DrEkf, Ekf, Estimator, StageRecord};
use drekf_core::mpc::{mpc_rollout_step, safety_margin, MpcController, MpcStatus, Plant};
use drekf_core::psd::{sample_gaussian, GaussianSampler};
use drekf_core::systems::NonlinearSystem;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorKind, Scenario};
use crate::error::{SimError, SimResult};
use crate::metrics::{summarize, MetricsSummary};
use crate::sdp_dump::SdpStageDump;

type DynSystem<'a> = dyn NonlinearSystem + Sync + 'a;

/// Per-run RNG: stream `run` of the master seed, so adding runs never
/// perturbs existing ones.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
    /// Keep the stage problems and solutions of this run's DR-EKF.
    pub dump_sdp_run: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub gamma: f64,
    pub vbar: f64,
    pub sbar: f64,
    pub rho: f64,
    pub theta_eff: f64,
    pub applied_radius: f64,
    pub in_region: bool,
}

/// One stage of one estimator in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: usize,
    pub truth: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub prior_sq: f64,
    pub posterior_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc_status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collision: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: usize,
    pub message: String,
    pub numerical: bool,
}

#[derive(Clone, Debug)]
pub struct EstimatorRun {
    pub estimator: EstimatorKind,
    pub stages: Vec<StageRow>,
    pub failure: Option<Failure>,
    /// Any collision along the closed-loop trajectory.
    pub collision: Option<bool>,
    pub goal_reached: Option<bool>,
    /// Full DR-EKF trace (empty for the baselines).
    pub trace: Vec<StageRecord>,
}

impl EstimatorRun {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn time_averaged_mse(&self) -> f64 {
        self.stages.iter().map(|s| s.posterior_sq).sum::<f64>() / self.stages.len().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub run: usize,
    pub estimators: Vec<EstimatorRun>,
}

impl RunRecord {
    pub fn get(&self, kind: EstimatorKind) -> Option<&EstimatorRun> {
        self.estimators.iter().find(|e| e.estimator == kind)
    }
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub summary: MetricsSummary,
    pub sdp: Vec<SdpStageDump>,
}

impl Experiment {
    pub fn failures(&self) -> impl Iterator<Item = (usize, EstimatorKind, &Failure)> {
        self.records.iter().flat_map(|r| {
            r.estimators.iter().filter_map(move |e| e.failure.as_ref().map(|f| (r.run, e.estimator, f)))
        })
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }
}

enum Filter<'a> {
    Ekf(Ekf<'a, DynSystem<'a>>),
    Dr(DrEkf<'a, DynSystem<'a>>),
}

impl Filter<'_> {
    fn estimator(&mut self) -> &mut dyn Estimator {
        match self {
            Filter::Ekf(f) => f,
            Filter::Dr(f) => f,
        }
    }

    fn certificate(&self) -> Option<CertificateRow> {
        let Filter::Dr(f) = self else { return None };
        f.trace().last().map(|r| {
            let c = &r.certificate;
            CertificateRow {
                gamma: c.gamma,
                vbar: c.vbar,
                sbar: c.sbar,
                rho: c.rho,
                theta_eff: c.theta_eff(),
                applied_radius: c.applied_radius,
                in_region: r.in_region,
            }
        })
    }

    fn into_trace(self) -> Vec<StageRecord> {
        match self {
            Filter::Ekf(_) => Vec::new(),
            Filter::Dr(f) => f.into_trace(),
        }
    }
}

fn make_filter<'a>(scenario: &'a Scenario, kind: EstimatorKind, record_sdp: bool) -> drekf_core::Result<Filter<'a>> {
    let system = scenario.system();
    Ok(match kind {
        EstimatorKind::EkfNominal => Filter::Ekf(Ekf::new(system, scenario.nominal.clone())),
        EstimatorKind::EkfTrue => Filter::Ekf(Ekf::new(system, scenario.truth.clone())),
        EstimatorKind::Drekf => {
            let mut cfg = scenario.drekf.clone().ok_or(drekf_core::Error::InvalidConfig("missing drekf config".into()))?;
            cfg.record_sdp = record_sdp;
            Filter::Dr(drekf_init(system, scenario.nominal.clone(), cfg)?)
        }
    })
}

fn failure(stage: usize, e: &drekf_core::Error) -> Failure {
    Failure { stage, message: e.to_string(), numerical: e.is_numerical() }
}

fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Record the stage the filter just updated.
fn stage_row(system: &DynSystem<'_>, filter: &mut Filter<'_>, truth: &DVector<f64>) -> Option<StageRow> {
    let cert = filter.certificate();
    let s = filter.estimator().last_state()?;
    Some(StageRow {
        stage: s.stage,
        truth: to_vec(truth),
        prior_mean: to_vec(&s.prior_mean),
        posterior_mean: to_vec(&s.posterior_mean),
        prior_sq: system.state_error(truth, &s.prior_mean).norm_squared(),
        posterior_sq: system.state_error(truth, &s.posterior_mean).norm_squared(),
        certificate: cert,
        delta: None,
        control: None,
        mpc_status: None,
        collision: None,
    })
}

fn open_loop_run(scenario: &Scenario, run: usize, dump_sdp: bool) -> RunRecord {
    let system = scenario.system();
    let mut rng = run_rng(scenario.seed, run);
    let plant = Plant {
        system,
        process: GaussianSampler::new(&scenario.truth.w),
        measurement: GaussianSampler::new(&scenario.truth.v),
    };
    let u = DVector::zeros(system.input_dim());
    let mut xs = Vec::with_capacity(scenario.horizon + 1);
    let mut ys = Vec::with_capacity(scenario.horizon + 1);
    let mut x = sample_gaussian(&scenario.truth.x0, &mut rng);
    let mut sample_error = None;
    for t in 0..=scenario.horizon {
        match plant.observe(&x, &mut rng) {
            Ok(y) => ys.push(y),
            Err(e) => {
                sample_error = Some(failure(t, &e));
                break;
            }
        }
        xs.push(x.clone());
        if t < scenario.horizon {
            x = plant.step(&x, &u, &mut rng);
        }
    }

    let estimators = scenario
        .estimators
        .iter()
        .map(|&kind| {
            let mut out = EstimatorRun {
                estimator: kind,
                stages: Vec::with_capacity(ys.len()),
                failure: sample_error.clone(),
                collision: None,
                goal_reached: None,
                trace: Vec::new(),
            };
            let mut filter = match make_filter(scenario, kind, dump_sdp) {
                Ok(f) => f,
                Err(e) => {
                    out.failure = Some(failure(0, &e));
                    return out;
                }
            };
            for (t, y) in ys.iter().enumerate() {
                let step = filter.estimator().update(y).map(|_| ()).and_then(|()| {
                    if t < scenario.horizon {
                        let row = stage_row(system, &mut filter, &xs[t]);
                        filter.estimator().predict(&u).map(|()| row)
                    } else {
                        Ok(stage_row(system, &mut filter, &xs[t]))
                    }
                });
                match step {
                    Ok(row) => out.stages.extend(row),
                    Err(e) => {
                        out.failure = Some(failure(t, &e));
                        break;
                    }
                }
            }
            out.trace = filter.into_trace();
            out
        })
        .collect();
    RunRecord { run, estimators }
}

fn closed_loop_estimator(scenario: &Scenario, run: usize, kind: EstimatorKind, dump_sdp: bool) -> EstimatorRun {
    let system = scenario.system();
    let mpc = scenario.mpc.as_ref().expect("closed-loop scenario has an MPC config");
    let mut out = EstimatorRun {
        estimator: kind,
        stages: Vec::with_capacity(scenario.horizon + 1),
        failure: None,
        collision: Some(false),
        goal_reached: Some(false),
        trace: Vec::new(),
    };
    let mut rng = run_rng(scenario.seed, run);
    let plant = Plant {
        system,
        process: GaussianSampler::new(&scenario.truth.w),
        measurement: GaussianSampler::new(&scenario.truth.v),
    };
    let mut x = sample_gaussian(&scenario.truth.x0, &mut rng);
    let mut filter = match make_filter(scenario, kind, dump_sdp) {
        Ok(f) => f,
        Err(e) => {
            out.failure = Some(failure(0, &e));
            return out;
        }
    };
    let mut controller = match MpcController::new(mpc.clone()) {
        Ok(c) => c,
        Err(e) => {
            out.failure = Some(failure(0, &e));
            return out;
        }
    };
    let initial = plant.observe(&x, &mut rng).and_then(|y| filter.estimator().update(&y).map(|_| ()));
    if let Err(e) = initial {
        out.failure = Some(failure(0, &e));
        out.trace = filter.into_trace();
        return out;
    }
    let mut row = stage_row(system, &mut filter, &x);
    let mut collided = mpc.collision([x[0], x[1]]).is_some();
    for t in 0..scenario.horizon {
        match mpc_rollout_step(&x, &plant, filter.estimator(), &mut controller, &mut rng) {
            Ok(step) => {
                if let Some(mut r) = row.take() {
                    r.delta = Some(step.margin);
                    r.control = Some([step.control[0], step.control[1]]);
                    r.mpc_status = Some(step.status.as_str().to_string());
                    r.collision = Some(step.collision);
                    out.stages.push(r);
                }
                if step.status == MpcStatus::InfeasibleRelaxed {
                    log::debug!("run {run} {kind} stage {t}: relaxed MPC solution");
                }
                collided |= step.collision;
                x = step.next_state;
                row = stage_row(system, &mut filter, &x);
            }
            Err(e) => {
                out.failure = Some(failure(t, &e));
                break;
            }
        }
    }
    if let Some(mut r) = row.filter(|_| out.failure.is_none()) {
        let margin = filter
            .estimator()
            .last_state()
            .map(|s| safety_margin(&s.posterior_cov, mpc.kappa_sigma));
        match margin {
            Some(Ok(m)) => r.delta = Some(m),
            Some(Err(e)) => out.failure = Some(failure(scenario.horizon, &e)),
            None => {}
        }
        r.collision = Some(mpc.collision([x[0], x[1]]).is_some());
        out.stages.push(r);
    }
    out.collision = Some(collided);
    out.goal_reached = Some((x[0] - mpc.goal[0]).hypot(x[1] - mpc.goal[1]) <= scenario.goal_tolerance);
    out.trace = filter.into_trace();
    out
}

fn closed_loop_run(scenario: &Scenario, run: usize, dump_sdp: bool) -> RunRecord {
    let estimators = scenario
        .estimators
        .iter()
        .map(|&kind| closed_loop_estimator(scenario, run, kind, dump_sdp))
        .collect();
    RunRecord { run, estimators }
}

fn check_filters(scenario: &Scenario) -> SimResult<()> {
    for &kind in &scenario.estimators {
        make_filter(scenario, kind, false).map_err(|e| SimError::config("drekf", e))?;
    }
    if let Some(mpc) = &scenario.mpc {
        MpcController::new(mpc.clone()).map_err(|e| SimError::config("mpc", e))?;
    }
    Ok(())
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> SimResult<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            return Err(SimError::config("--jobs", "must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| SimError::config("--jobs", e))?;
    Ok(pool.install(f))
}

/// Run every configured estimator over all Monte Carlo runs. Runs that fail
/// numerically are recorded, not propagated; see [`Experiment::has_failures`].
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> SimResult<Experiment> {
    check_filters(scenario)?;
    log::info!(
        "{} runs x {} stages, estimators: {}",
        scenario.runs,
        scenario.horizon + 1,
        scenario.estimators.iter().map(EstimatorKind::as_str).collect::<Vec<_>>().join(", ")
    );
    let closed = scenario.is_closed_loop();
    let mut records: Vec<RunRecord> = in_pool(opts.jobs, || {
        (0..scenario.runs)
            .into_par_iter()
            .map(|run| {
                let dump = opts.dump_sdp_run == Some(run);
                let rec = if closed { closed_loop_run(scenario, run, dump) } else { open_loop_run(scenario, run, dump) };
                log::debug!("run {run} done");
                rec
            })
            .collect()
    })?;
    let mut sdp = Vec::new();
    if let Some(run) = opts.dump_sdp_run {
        if let Some(dr) = records.get(run).and_then(|r| r.get(EstimatorKind::Drekf)) {
            for rec in &dr.trace {
                if let Some((problem, solution)) = &rec.sdp {
                    sdp.push(SdpStageDump::new(rec.state.stage, problem, solution));
                }
            }
        }
        for r in &mut records {
            for e in &mut r.estimators {
                for t in &mut e.trace {
                    t.sdp = None;
                }
            }
        }
    }
    let summary = summarize(&records, &scenario.estimators)?;
    for (run, kind, f) in records.iter().flat_map(|r| {
        r.estimators.iter().filter_map(move |e| e.failure.as_ref().map(|f| (r.run, e.estimator, f)))
    }) {
        log::warn!("run {run} {kind} failed at stage {}: {}", f.stage, f.message);
    }
    Ok(Experiment { seed: scenario.seed, records, summary, sdp })
}

/// Open-loop coordinated-turn runs for each initial turn rate.
pub fn run_ct_benchmark(scenario: &Scenario, omega_grid: &[f64], opts: &RunOptions) -> SimResult<Vec<(f64, Experiment)>> {
    if !matches!(scenario.system, crate::config::SystemModel::Ct(_)) {
        return Err(SimError::config("scenario.system", "the turn-rate benchmark needs the ct system"));
    }
    omega_grid
        .iter()
        .map(|&w| {
            let mut raw = scenario.raw.clone();
            raw.ct.get_or_insert(crate::config::CtSection { omega0: None }).omega0 = Some(w.into());
            log::info!("omega0 = {w}");
            let s = Scenario::from_raw(raw)?;
            Ok((w, run_scenario(&s, opts)?))
        })
        .collect()
}

/// Closed-loop safe-navigation rollouts.
pub fn run_safe_nav_benchmark(scenario: &Scenario, opts: &RunOptions) -> SimResult<Experiment> {
    if !scenario.is_closed_loop() {
        return Err(SimError::config("mpc", "the safe-navigation benchmark needs an MPC section"));
    }
    run_scenario(scenario, opts)
}

/// Apply each value of `key` as an override to `table` and run.
pub fn run_sweep(
    table: &toml::Table,
    key: &str,
    values: &[String],
    opts: &RunOptions,
) -> SimResult<Vec<(String, Experiment)>> {
    if values.is_empty() {
        return Err(SimError::config("--values", "at least one sweep value is required"));
    }
    crate::config::resolve_key(table, key)?;
    values
        .iter()
        .map(|v| {
            let mut t = table.clone();
            crate::config::apply_override(&mut t, key, v)?;
            let s = Scenario::from_raw(crate::config::raw_from_table(&t)?)?;
            log::info!("{key} = {v}");
            Ok((v.clone(), run_scenario(&s, opts)?))
        })
        .collect()
}

/// Pick the DR-EKF radius with the lowest time-averaged MSE over a grid,
/// each evaluated on every seed in `seeds`. Ties keep the smaller radius.
pub fn select_theta(
    table: &toml::Table,
    grid: &[f64],
    seeds: &[u64],
    opts: &RunOptions,
) -> SimResult<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(SimError::config("drekf.theta", "validation needs a nonempty grid and seed list"));
    }
    let mut table_out = Vec::with_capacity(grid.len());
    for &theta in grid {
        let mut mse = 0.0;
        for &seed in seeds {
            let mut t = table.clone();
            crate::config::apply_override(&mut t, "drekf.theta", &format!("{theta:?}"))?;
            crate::config::apply_override(&mut t, "scenario.seed", &seed.to_string())?;
            crate::config::apply_override(&mut t, "scenario.estimators", "[\"drekf\"]")?;
            let s = Scenario::from_raw(crate::config::raw_from_table(&t)?)?;
            let exp = run_scenario(&s, opts)?;
            let dr = exp
                .summary
                .get(EstimatorKind::Drekf)
                .ok_or_else(|| SimError::config("scenario.estimators", "drekf missing"))?;
            mse += dr.mse_mean;
        }
        table_out.push((theta, mse / seeds.len() as f64));
    }
    let best = table_out
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
    Ok((best.0, table_out))
}
