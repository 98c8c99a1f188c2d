//! Scenario configuration: TOML schema, dotted-key overrides and validation
//! into a runnable [`Scenario`].
//!
//! Any scalar or list may be written either plainly or as
//! `{ value = …, provenance = "…" }` to record where a value comes from.

use std::fmt;
use std::path::Path;

use drekf_core::ambiguity::CurvatureConstants;
use drekf_core::filter::{DrEkfConfig, EnvelopeMode, EnvelopeSequences, NoiseModel};
use drekf_core::mpc::{MpcConfig, Obstacle};
use drekf_core::psd::{GaussianLaw, PsdMatrix};
use drekf_core::sdp::{DEFAULT_MAX_ITERS, DEFAULT_TOL_OBJ};
use drekf_core::systems::{AffineSystem, CoordinatedTurn, NonlinearSystem, SystemId, Unicycle};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{SimError, SimResult};

/// Provenance tag for values not stated by the reference experiments.
pub const NON_PAPER_DEFAULT: &str = "non-paper-default";

pub const CT_TEMPLATE: &str = include_str!("../../../configs/ct_tracking.toml");
pub const SAFE_NAV_TEMPLATE: &str = include_str!("../../../configs/safe_nav.toml");

/// Bundled template by name (`ct_tracking` or `safe_nav`).
pub fn template(name: &str) -> Option<&'static str> {
    match name {
        "ct" | "ct_tracking" => Some(CT_TEMPLATE),
        "safe_nav" | "unicycle" => Some(SAFE_NAV_TEMPLATE),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param<T> {
    Plain(T),
    Tagged(Tagged<T>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tagged<T> {
    pub value: T,
    pub provenance: String,
}

impl<T> Param<T> {
    pub fn get(&self) -> &T {
        match self {
            Param::Plain(v) => v,
            Param::Tagged(t) => &t.value,
        }
    }

    pub fn provenance(&self) -> Option<&str> {
        match self {
            Param::Plain(_) => None,
            Param::Tagged(t) => Some(&t.provenance),
        }
    }
}

impl<T> From<T> for Param<T> {
    fn from(v: T) -> Self {
        Param::Plain(v)
    }
}

/// Covariance given as its diagonal or as a full row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, key: &str) -> SimResult<DMatrix<f64>> {
        match self {
            MatrixSpec::Diagonal(d) => Ok(DMatrix::from_diagonal(&DVector::from_column_slice(d))),
            MatrixSpec::Full(rows) => {
                let n = rows.len();
                let m = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != m) {
                    return Err(SimError::config(key, "matrix rows have different lengths"));
                }
                Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub scenario: ScenarioSection,
    pub truth: NoiseSection,
    pub nominal: NoiseSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drekf: Option<DrekfSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ct: Option<CtSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unicycle: Option<UnicycleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<AffineSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub system: String,
    pub dt: Param<f64>,
    /// Number of propagation steps T; stages run 0..=T.
    pub horizon: Param<usize>,
    pub runs: Param<usize>,
    pub seed: Param<u64>,
    pub estimators: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub x0_mean: Param<Vec<f64>>,
    pub x0_cov: Param<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_mean: Option<Param<Vec<f64>>>,
    pub w_cov: Param<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_mean: Option<Param<Vec<f64>>>,
    pub v_cov: Param<MatrixSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrekfSection {
    pub theta: Param<f64>,
    /// `strict`, `pathwise` or `pathwise_posterior`.
    pub envelope_mode: Param<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_cap: Option<Param<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature: Option<CurvatureSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelopes: Option<EnvelopeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_obj: Option<Param<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<Param<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureSection {
    pub lf: f64,
    pub lh: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_h: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeSection {
    pub a: Vec<f64>,
    pub m: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtSection {
    /// Initial turn rate; overrides the last entry of both initial means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega0: Option<Param<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnicycleSection {
    pub beacons: Param<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSection {
    pub a: MatrixSpec,
    pub h: MatrixSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: Param<usize>,
    pub q: f64,
    pub r_s: f64,
    pub r_omega: f64,
    pub q_f: f64,
    pub s_max: f64,
    pub omega_max: f64,
    pub kappa_sigma: f64,
    pub d_min_base: Param<f64>,
    pub goal: Param<[f64; 2]>,
    pub obstacles: Param<Vec<ObstacleSection>>,
    /// Distance to the goal counted as reached, for reporting only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_tolerance: Option<Param<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    EkfNominal,
    EkfTrue,
    Drekf,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::EkfNominal, EstimatorKind::EkfTrue, EstimatorKind::Drekf];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::EkfNominal => "ekf_nominal",
            EstimatorKind::EkfTrue => "ekf_true",
            EstimatorKind::Drekf => "drekf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        EstimatorKind::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Concrete system of a scenario.
#[derive(Clone, Debug)]
pub enum SystemModel {
    Ct(CoordinatedTurn),
    Unicycle(Unicycle),
    Affine(AffineSystem),
}

impl SystemModel {
    pub fn as_dyn(&self) -> &(dyn NonlinearSystem + Sync) {
        match self {
            SystemModel::Ct(s) => s,
            SystemModel::Unicycle(s) => s,
            SystemModel::Affine(s) => s,
        }
    }
}

/// Validated, runnable scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub raw: RawConfig,
    pub system: SystemModel,
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub truth: NoiseModel,
    pub nominal: NoiseModel,
    pub drekf: Option<DrEkfConfig>,
    pub mpc: Option<MpcConfig>,
    pub goal_tolerance: f64,
}

/// Parse TOML text into a generic table.
pub fn parse_table(text: &str) -> SimResult<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| SimError::Parse(e.to_string()))
}

pub fn load_table(path: &Path) -> SimResult<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    parse_table(&text)
}

/// Deserialize a table into the schema; errors carry the dotted key path.
pub fn raw_from_table(table: &toml::Table) -> SimResult<RawConfig> {
    let value = toml::Value::Table(table.clone());
    serde_path_to_error::deserialize(value).map_err(|e| {
        let key = e.path().to_string();
        SimError::config(if key == "." { String::from("<root>") } else { key }, e.inner())
    })
}

pub fn to_toml_string(raw: &RawConfig) -> SimResult<String> {
    toml::to_string_pretty(raw).map_err(|e| SimError::Parse(e.to_string()))
}

/// Resolve a possibly abbreviated key: dotted keys are taken literally, a
/// bare key must name exactly one leaf anywhere in the table.
pub fn resolve_key(table: &toml::Table, key: &str) -> SimResult<Vec<String>> {
    if key.is_empty() {
        return Err(SimError::config(key, "empty override key"));
    }
    if key.contains('.') {
        return Ok(key.split('.').map(String::from).collect());
    }
    if table.contains_key(key) {
        return Ok(vec![key.to_string()]);
    }
    let mut found = Vec::new();
    find_leaf(table, key, &mut Vec::new(), &mut found);
    match found.len() {
        1 => Ok(found.pop().unwrap_or_default()),
        0 => Err(SimError::config(key, "unknown key; use the dotted form section.key")),
        _ => Err(SimError::config(
            key,
            format!(
                "ambiguous key, candidates: {}",
                found.iter().map(|p| p.join(".")).collect::<Vec<_>>().join(", ")
            ),
        )),
    }
}

fn find_leaf(table: &toml::Table, key: &str, prefix: &mut Vec<String>, found: &mut Vec<Vec<String>>) {
    for (k, v) in table {
        prefix.push(k.clone());
        if k == key {
            found.push(prefix.clone());
        } else if let toml::Value::Table(t) = v {
            if !is_tagged(t) {
                find_leaf(t, key, prefix, found);
            }
        }
        prefix.pop();
    }
}

fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("value") && t.contains_key("provenance")
}

/// Parse an override value as a TOML value, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `key=value`, creating intermediate tables as needed. A tagged value
/// is replaced by the plain override.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> SimResult<()> {
    let path = resolve_key(table, key)?;
    let mut new = parse_value(value);
    let mut cursor = table;
    for (i, part) in path.iter().enumerate() {
        if i + 1 == path.len() {
            let old = cursor.get(part);
            let old_plain = match old {
                Some(toml::Value::Table(t)) if is_tagged(t) => t.get("value"),
                other => other,
            };
            if let (Some(toml::Value::Float(_)), toml::Value::Integer(n)) = (old_plain, &new) {
                new = toml::Value::Float(*n as f64);
            }
            cursor.insert(part.clone(), new);
            return Ok(());
        }
        let entry = cursor
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(SimError::config(key, format!("`{part}` is not a table"))),
        };
    }
    Ok(())
}

/// Parse `K=V`.
pub fn split_override(spec: &str) -> SimResult<(&str, &str)> {
    spec.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| SimError::config(spec, "override must have the form KEY=VALUE"))
}

/// Load a config file, apply overrides and validate.
pub fn load_scenario(path: &Path, overrides: &[String]) -> SimResult<Scenario> {
    let mut table = load_table(path)?;
    for spec in overrides {
        let (k, v) = split_override(spec)?;
        apply_override(&mut table, k, v)?;
    }
    Scenario::from_raw(raw_from_table(&table)?)
}

fn psd(key: &str, m: DMatrix<f64>) -> SimResult<PsdMatrix> {
    PsdMatrix::new(m).map_err(|e| SimError::config(key, e))
}

fn vector(key: &str, v: &[f64], dim: usize) -> SimResult<DVector<f64>> {
    if v.len() != dim {
        return Err(SimError::config(key, format!("expected length {dim}, found {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(SimError::config(key, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn law(
    section: &str,
    field: &str,
    mean: Option<&Param<Vec<f64>>>,
    cov: &Param<MatrixSpec>,
    dim: usize,
    positive_definite: bool,
) -> SimResult<GaussianLaw> {
    let cov_key = format!("{section}.{field}_cov");
    let cov_m = cov.get().to_matrix(&cov_key)?;
    if cov_m.nrows() != dim || cov_m.ncols() != dim {
        return Err(SimError::config(
            &cov_key,
            format!("expected {dim}x{dim}, found {}x{}", cov_m.nrows(), cov_m.ncols()),
        ));
    }
    let cov_psd = psd(&cov_key, cov_m)?;
    if positive_definite && cov_psd.min_eigenvalue() <= 0.0 {
        return Err(SimError::config(&cov_key, "nominal covariance must be positive definite"));
    }
    let mean_v = match mean {
        Some(m) => vector(&format!("{section}.{field}_mean"), m.get(), dim)?,
        None => DVector::zeros(dim),
    };
    GaussianLaw::new(mean_v, cov_psd).map_err(|e| SimError::config(&cov_key, e))
}

fn noise_model(section: &str, s: &NoiseSection, system: &dyn NonlinearSystem, omega0: Option<f64>, nominal: bool) -> SimResult<NoiseModel> {
    let (nx, ny) = (system.state_dim(), system.meas_dim());
    let mut x0_mean = s.x0_mean.clone();
    if let Some(w) = omega0 {
        let mut v = x0_mean.get().clone();
        if let Some(last) = v.last_mut() {
            *last = w;
        }
        x0_mean = Param::Plain(v);
    }
    Ok(NoiseModel {
        x0: law(section, "x0", Some(&x0_mean), &s.x0_cov, nx, nominal)?,
        w: law(section, "w", s.w_mean.as_ref(), &s.w_cov, nx, nominal)?,
        v: law(section, "v", s.v_mean.as_ref(), &s.v_cov, ny, nominal)?,
    })
}

impl Scenario {
    pub fn from_raw(raw: RawConfig) -> SimResult<Self> {
        let sc = &raw.scenario;
        let dt = *sc.dt.get();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SimError::config("scenario.dt", "must be positive"));
        }
        let horizon = *sc.horizon.get();
        if horizon == 0 {
            return Err(SimError::config("scenario.horizon", "must be at least 1"));
        }
        let runs = *sc.runs.get();
        if runs == 0 {
            return Err(SimError::config("scenario.runs", "must be at least 1"));
        }
        let mut estimators = Vec::new();
        for name in &sc.estimators {
            let e = EstimatorKind::parse(name).ok_or_else(|| {
                SimError::config("scenario.estimators", format!("unknown estimator `{name}` (ekf_nominal, ekf_true, drekf)"))
            })?;
            if !estimators.contains(&e) {
                estimators.push(e);
            }
        }
        if estimators.is_empty() {
            return Err(SimError::config("scenario.estimators", "at least one estimator is required"));
        }

        let system = match sc.system.as_str() {
            "affine" | "linear" => {
                let a = raw.affine.as_ref().ok_or_else(|| SimError::config("affine", "section required for the affine system"))?;
                let am = a.a.to_matrix("affine.a")?;
                let hm = a.h.to_matrix("affine.h")?;
                if am.nrows() != am.ncols() {
                    return Err(SimError::config("affine.a", "must be square"));
                }
                SystemModel::Affine(AffineSystem::linear(am, hm).map_err(|e| SimError::config("affine.h", e))?)
            }
            other => match other.parse::<SystemId>() {
                Ok(SystemId::CoordinatedTurn) => SystemModel::Ct(CoordinatedTurn::new(dt).map_err(|e| SimError::config("scenario.dt", e))?),
                Ok(SystemId::SafeNavUnicycle) => {
                    let u = raw.unicycle.as_ref().ok_or_else(|| SimError::config("unicycle", "section required for the unicycle system"))?;
                    SystemModel::Unicycle(Unicycle::new(dt, u.beacons.get().clone()).map_err(|e| SimError::config("unicycle.beacons", e))?)
                }
                Err(e) => return Err(SimError::config("scenario.system", e)),
            },
        };
        let sys = system.as_dyn();

        let omega0 = match (&system, raw.ct.as_ref().and_then(|c| c.omega0.as_ref())) {
            (SystemModel::Ct(_), Some(w)) => {
                if !w.get().is_finite() {
                    return Err(SimError::config("ct.omega0", "must be finite"));
                }
                Some(*w.get())
            }
            (_, Some(_)) => return Err(SimError::config("ct.omega0", "only valid for the coordinated-turn system")),
            _ => None,
        };
        let truth = noise_model("truth", &raw.truth, sys, omega0, false)?;
        let nominal = noise_model("nominal", &raw.nominal, sys, omega0, true)?;

        let drekf = match (&raw.drekf, estimators.contains(&EstimatorKind::Drekf)) {
            (Some(d), _) => Some(drekf_config(d, &system)?),
            (None, true) => return Err(SimError::config("drekf", "section required when the drekf estimator is enabled")),
            (None, false) => None,
        };

        let (mpc, goal_tolerance) = match (&raw.mpc, &system) {
            (Some(m), SystemModel::Unicycle(_)) => {
                let cfg = MpcConfig {
                    horizon: *m.horizon.get(),
                    dt,
                    q: m.q,
                    r_s: m.r_s,
                    r_omega: m.r_omega,
                    q_f: m.q_f,
                    s_max: m.s_max,
                    omega_max: m.omega_max,
                    goal: *m.goal.get(),
                    obstacles: m.obstacles.get().iter().map(|o| Obstacle { center: o.center, radius: o.radius }).collect(),
                    kappa_sigma: m.kappa_sigma,
                    d_min_base: *m.d_min_base.get(),
                };
                cfg.validate().map_err(|e| SimError::config("mpc", e))?;
                let tol = m.goal_tolerance.as_ref().map_or(0.5, |t| *t.get());
                if !(tol > 0.0) {
                    return Err(SimError::config("mpc.goal_tolerance", "must be positive"));
                }
                (Some(cfg), tol)
            }
            (Some(_), _) => return Err(SimError::config("mpc", "only valid for the unicycle system")),
            (None, SystemModel::Unicycle(_)) => return Err(SimError::config("mpc", "section required for the unicycle system")),
            (None, _) => (None, 0.5),
        };

        Ok(Scenario {
            horizon,
            runs,
            seed: *sc.seed.get(),
            estimators,
            truth,
            nominal,
            drekf,
            mpc,
            goal_tolerance,
            system,
            raw,
        })
    }

    pub fn system(&self) -> &(dyn NonlinearSystem + Sync) {
        self.system.as_dyn()
    }

    pub fn is_closed_loop(&self) -> bool {
        self.mpc.is_some()
    }
}

fn drekf_config(d: &DrekfSection, system: &SystemModel) -> SimResult<DrEkfConfig> {
    let theta = *d.theta.get();
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(SimError::config("drekf.theta", "must be finite and nonnegative"));
    }
    let curvature = match &d.curvature {
        Some(c) => CurvatureConstants::new(
            c.lf,
            c.lh,
            c.alpha_f.unwrap_or(3f64.sqrt()),
            c.alpha_h.unwrap_or(3f64.sqrt()),
        )
        .map_err(|e| SimError::config("drekf.curvature", e))?,
        None => system.as_dyn().curvature(),
    };
    let envelopes = match d.envelope_mode.get().as_str() {
        "pathwise" => EnvelopeMode::Pathwise,
        "pathwise_posterior" => EnvelopeMode::PathwisePosterior,
        "strict" => {
            let e = d
                .envelopes
                .as_ref()
                .ok_or_else(|| SimError::config("drekf.envelopes", "strict mode needs envelope sequences a, m, k"))?;
            EnvelopeMode::Strict(EnvelopeSequences { a: e.a.clone(), m: e.m.clone(), k: e.k.clone() })
        }
        other => {
            return Err(SimError::config(
                "drekf.envelope_mode",
                format!("unknown mode `{other}` (strict, pathwise, pathwise_posterior)"),
            ))
        }
    };
    let mut cfg = DrEkfConfig::new(theta, curvature);
    cfg.envelopes = envelopes;
    if let Some(cap) = &d.radius_cap {
        if !(*cap.get() >= 0.0) {
            return Err(SimError::config("drekf.radius_cap", "must be nonnegative"));
        }
        cfg.radius_cap = Some(*cap.get());
    }
    cfg.tol_obj = d.tol_obj.as_ref().map_or(DEFAULT_TOL_OBJ, |t| *t.get());
    cfg.max_iters = d.max_iters.as_ref().map_or(DEFAULT_MAX_ITERS, |t| *t.get());
    if !(cfg.tol_obj > 0.0) {
        return Err(SimError::config("drekf.tol_obj", "must be positive"));
    }
    Ok(cfg)
}
