use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use super::{check_finite, entry, Estimator, FilterState, NoiseModel};
use crate::ambiguity::{effective_radius, prior_moment_bound, AmbiguityRadius, CurvatureConstants, NominalStackedNoise};
use crate::error::{Error, Result};
use crate::psd::{spectral_norm, PsdMatrix};
use crate::sdp::{build_stage_problem, solve_stage_sdp, SdpDiagnostics, StageSdpProblem, StageSdpSolution};
use crate::sdp::{DEFAULT_MAX_ITERS, DEFAULT_TOL_OBJ};
use crate::systems::NonlinearSystem;

/// Effective radii beyond this multiple of the nominal noise scale are
/// reported as a diverged certificate instead of being handed to the solver.
pub const MAX_RADIUS_RATIO: f64 = 1e6;

/// User-supplied envelope sequences (ā_t, m̄_t, k̄_t). Shorter sequences
/// repeat their last entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeSequences {
    pub a: Vec<f64>,
    pub m: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvelopeMode {
    Strict(EnvelopeSequences),
    /// Realized ‖A_t‖, ‖I − K*C_t‖, ‖K*_t‖ inside the envelope recursions.
    Pathwise,
    /// Realized norms, and the posterior bound taken directly as
    /// V̄_t = sqrt(Tr Σ*_{x,t}) from the stage solution. The ρ recursion is
    /// still evaluated and reported but does not feed back.
    PathwisePosterior,
}

impl EnvelopeMode {
    pub fn label(&self) -> &'static str {
        match self {
            EnvelopeMode::Strict(_) => "strict",
            EnvelopeMode::Pathwise => "pathwise",
            EnvelopeMode::PathwisePosterior => "pathwise_posterior",
        }
    }

    pub fn is_strict(&self) -> bool {
        matches!(self, EnvelopeMode::Strict(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrEkfConfig {
    /// Nominal radius per stage; the last entry repeats.
    pub theta: Vec<f64>,
    pub envelopes: EnvelopeMode,
    pub curvature: CurvatureConstants,
    pub tol_obj: f64,
    pub max_iters: usize,
    /// Keep each stage's SDP problem and solution in the trace.
    pub record_sdp: bool,
    /// Upper limit on the radius handed to the stage problem. `None` runs the
    /// recursion as is and fails with [`Error::CertificateDiverged`] when the
    /// radius overflows.
    pub radius_cap: Option<f64>,
}

impl DrEkfConfig {
    pub fn new(theta: f64, curvature: CurvatureConstants) -> Self {
        DrEkfConfig {
            theta: alloc::vec![theta],
            envelopes: EnvelopeMode::Pathwise,
            curvature,
            tol_obj: DEFAULT_TOL_OBJ,
            max_iters: DEFAULT_MAX_ITERS,
            record_sdp: false,
            radius_cap: None,
        }
    }
}

/// Certificate scalars of one stage. `a_env` and `eta_f` refer to the
/// propagation out of this stage and stay zero until `predict` runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertificateState {
    pub stage: usize,
    pub gamma: f64,
    pub sbar: f64,
    pub rho_prior: f64,
    pub rho: f64,
    pub vbar: f64,
    /// θ, η̄ᶠ_{t−1}, η̄ʰ_t and θ̄ᵉᶠᶠ_t.
    pub radius: AmbiguityRadius,
    /// Radius the stage problem was solved with (θ̄ᵉᶠᶠ_t unless capped).
    pub applied_radius: f64,
    /// η̄ᶠ_t = (L_f/2)·α_f·V̄_t²
    pub eta_f: f64,
    pub a_env: f64,
    pub m_env: f64,
    pub k_env: f64,
    pub strict: bool,
}

impl CertificateState {
    pub fn eta_h(&self) -> f64 {
        self.radius.residual_h
    }

    pub fn theta_eff(&self) -> f64 {
        self.radius.effective
    }
}

/// Everything the filter knows about one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub state: FilterState,
    pub certificate: CertificateState,
    pub diagnostics: SdpDiagnostics,
    /// ν_t = y_t − h(x̄⁻_t) − v̂_t (angles wrapped)
    pub innovation: DVector<f64>,
    pub gain: DMatrix<f64>,
    /// Prior mean inside the configured operating region (true if none).
    pub in_region: bool,
    pub sdp: Option<(StageSdpProblem, StageSdpSolution)>,
}

/// Residual-aware DR-EKF handle.
pub struct DrEkf<'a, S: NonlinearSystem + ?Sized> {
    system: &'a S,
    config: DrEkfConfig,
    nominal_initial: NominalStackedNoise,
    nominal_stage: NominalStackedNoise,
    model: NoiseModel,
    root_tr_x0: f64,
    root_tr_w: f64,
    root_tr_v: f64,
    stage: usize,
    prior_mean: DVector<f64>,
    /// (A_{t−1}, Σ_{x,t−1}) once a stage has been propagated.
    propagation: Option<(DMatrix<f64>, PsdMatrix)>,
    rho_prior: f64,
    awaiting_predict: bool,
    trace: Vec<StageRecord>,
}

/// Start the filter at `x̄₀⁻ = x̂₀⁻`, `ρ₀⁻ = 0`, `η̄ᶠ₋₁ = 0`.
pub fn drekf_init<'a, S: NonlinearSystem + ?Sized>(
    system: &'a S,
    nominal: NoiseModel,
    config: DrEkfConfig,
) -> Result<DrEkf<'a, S>> {
    let nx = system.state_dim();
    let ny = system.meas_dim();
    for (law, dim, what) in [(&nominal.x0, nx, "nominal x0"), (&nominal.w, nx, "nominal w"), (&nominal.v, ny, "nominal v")] {
        if law.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: what,
                expected: dim,
                found: law.dim(),
            });
        }
    }
    if config.theta.is_empty() {
        return Err(Error::InvalidConfig(String::from("theta sequence is empty")));
    }
    for &th in &config.theta {
        if !th.is_finite() {
            return Err(Error::NonFinite("theta"));
        }
        if th < 0.0 {
            return Err(Error::NegativeInput("theta"));
        }
    }
    config.curvature.validate()?;
    if let EnvelopeMode::Strict(env) = &config.envelopes {
        if env.a.is_empty() || env.m.is_empty() || env.k.is_empty() {
            return Err(Error::InvalidConfig(String::from(
                "strict envelope mode needs nonempty a, m and k sequences",
            )));
        }
        if env.a.iter().chain(&env.m).chain(&env.k).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig(String::from("envelopes must be finite and nonnegative")));
        }
    }
    let nominal_initial = NominalStackedNoise::new(&nominal.x0, &nominal.v)?;
    let nominal_stage = NominalStackedNoise::new(&nominal.w, &nominal.v)?;
    Ok(DrEkf {
        system,
        root_tr_x0: nominal.x0.cov().trace().max(0.0).sqrt(),
        root_tr_w: nominal.w.cov().trace().max(0.0).sqrt(),
        root_tr_v: nominal.v.cov().trace().max(0.0).sqrt(),
        prior_mean: nominal.x0.mean().clone(),
        model: nominal,
        config,
        nominal_initial,
        nominal_stage,
        stage: 0,
        propagation: None,
        rho_prior: 0.0,
        awaiting_predict: false,
        trace: Vec::new(),
    })
}

impl<'a, S: NonlinearSystem + ?Sized> DrEkf<'a, S> {
    pub fn trace(&self) -> &[StageRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<StageRecord> {
        self.trace
    }

    pub fn config(&self) -> &DrEkfConfig {
        &self.config
    }

    /// ρ⁻ for the next stage.
    pub fn rho_prior(&self) -> f64 {
        self.rho_prior
    }

    fn update_inner(&mut self, y: &DVector<f64>) -> Result<()> {
        if self.awaiting_predict {
            return Err(Error::CallOrder("update called twice without predict"));
        }
        check_finite(y, "measurement")?;
        if y.len() != self.system.meas_dim() {
            return Err(Error::DimensionMismatch {
                context: "measurement",
                expected: self.system.meas_dim(),
                found: y.len(),
            });
        }
        let t = self.stage;
        let theta = entry(&self.config.theta, t);
        let curvature = self.config.curvature;
        let c = self.system.measurement_jacobian(&self.prior_mean)?;

        let diverged = self.trace.last().is_some_and(|prev| !prev.certificate.vbar.is_finite());
        let bound = if diverged {
            None
        } else {
            let (gamma, eta_f_prev) = match self.trace.last() {
                None => prior_moment_bound(0.0, 0.0, &self.nominal_initial, theta, &curvature, true)?,
                Some(prev) => prior_moment_bound(
                    prev.certificate.vbar,
                    prev.certificate.a_env,
                    &self.nominal_stage,
                    theta,
                    &curvature,
                    false,
                )?,
            };
            (gamma.is_finite() && eta_f_prev.is_finite()).then_some((gamma, eta_f_prev))
        };
        let (gamma, radius) = match bound {
            Some((gamma, eta_f_prev)) => (gamma, effective_radius(gamma, eta_f_prev, theta, &curvature)?),
            None => {
                if self.config.radius_cap.is_none() {
                    return Err(Error::CertificateDiverged {
                        radius: f64::INFINITY,
                    });
                }
                let inf = f64::INFINITY;
                let radius = AmbiguityRadius {
                    nominal: theta,
                    residual_f: inf,
                    residual_h: inf,
                    effective: inf,
                };
                (inf, radius)
            }
        };
        let applied_radius = match self.config.radius_cap {
            Some(cap) => radius.effective.min(cap),
            None => {
                let scale = 1.0 + self.nominal_stage.cov().trace().max(self.nominal_initial.cov().trace()).sqrt();
                if !(radius.effective <= MAX_RADIUS_RATIO * scale) {
                    return Err(Error::CertificateDiverged {
                        radius: radius.effective,
                    });
                }
                radius.effective
            }
        };

        let problem = match &self.propagation {
            None => build_stage_problem(None, &c, None, &self.nominal_initial, applied_radius, true)?,
            Some((a, post)) => build_stage_problem(Some(a), &c, Some(post), &self.nominal_stage, applied_radius, false)?,
        };
        let solution = solve_stage_sdp(&problem, self.config.tol_obj, self.config.max_iters)?;

        let mut innovation = y - self.system.measure(&self.prior_mean)? - self.model.v.mean();
        self.system.wrap_innovation(&mut innovation);
        let mut posterior_mean = &self.prior_mean + &solution.gain * &innovation;
        self.system.normalize_state(&mut posterior_mean);

        let (m_env, k_env) = match &self.config.envelopes {
            EnvelopeMode::Strict(env) => (entry(&env.m, t), entry(&env.k, t)),
            EnvelopeMode::Pathwise | EnvelopeMode::PathwisePosterior => {
                let nx = self.system.state_dim();
                let ikc = DMatrix::identity(nx, nx) - &solution.gain * &c;
                (spectral_norm(&ikc), spectral_norm(&solution.gain))
            }
        };
        let sbar = match self.trace.last() {
            None => m_env * self.root_tr_x0 + k_env * self.root_tr_v + (m_env + k_env) * theta,
            Some(prev) => {
                m_env * (prev.certificate.a_env * prev.certificate.sbar + self.root_tr_w)
                    + k_env * self.root_tr_v
                    + (m_env + k_env) * theta
            }
        };
        let rho = m_env * self.rho_prior + k_env * radius.residual_h;
        let vbar = match self.config.envelopes {
            EnvelopeMode::PathwisePosterior => solution.posterior_cov.trace().max(0.0).sqrt(),
            _ => sbar + rho,
        };
        let certificate = CertificateState {
            stage: t,
            gamma,
            sbar,
            rho_prior: self.rho_prior,
            rho,
            vbar,
            radius,
            applied_radius,
            eta_f: 0.0,
            a_env: 0.0,
            m_env,
            k_env,
            strict: self.config.envelopes.is_strict(),
        };

        let in_region = self.system.operating_region().map_or(true, |r| r.contains(&self.prior_mean));
        let state = FilterState {
            stage: t,
            prior_mean: self.prior_mean.clone(),
            prior_cov: solution.prior_cov.clone(),
            posterior_mean,
            posterior_cov: solution.posterior_cov.clone(),
        };
        let record = StageRecord {
            state,
            certificate,
            diagnostics: solution.diagnostics.clone(),
            gain: solution.gain.clone(),
            innovation,
            in_region,
            sdp: if self.config.record_sdp { Some((problem, solution)) } else { None },
        };
        self.trace.push(record);
        self.awaiting_predict = true;
        Ok(())
    }
}

impl<'a, S: NonlinearSystem + ?Sized> Estimator for DrEkf<'a, S> {
    fn update(&mut self, y: &DVector<f64>) -> Result<&FilterState> {
        let t = self.stage;
        self.update_inner(y).map_err(|e| e.at_stage(t))?;
        Ok(&self.trace.last().expect("just pushed").state)
    }

    fn predict(&mut self, u: &DVector<f64>) -> Result<()> {
        if !self.awaiting_predict {
            return Err(Error::CallOrder("predict called before update"));
        }
        let t = self.stage;
        let curvature = self.config.curvature;
        let strict_a = match &self.config.envelopes {
            EnvelopeMode::Strict(env) => Some(entry(&env.a, t)),
            _ => None,
        };
        let record = self.trace.last_mut().expect("update ran");
        let a = self.system.dynamics_jacobian(&record.state.posterior_mean, u);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dynamics Jacobian").at_stage(t));
        }
        let a_env = strict_a.unwrap_or_else(|| spectral_norm(&a));
        let cert = &mut record.certificate;
        cert.a_env = a_env;
        cert.eta_f = curvature.residual_f(cert.vbar);
        self.rho_prior = a_env * cert.rho + cert.eta_f;

        let mut prior = self.system.dynamics(&record.state.posterior_mean, u) + self.model.w.mean();
        self.system.normalize_state(&mut prior);
        check_finite(&prior, "predicted state").map_err(|e| e.at_stage(t))?;
        self.prior_mean = prior;
        self.propagation = Some((a, record.state.posterior_cov.clone()));
        self.stage += 1;
        self.awaiting_predict = false;
        Ok(())
    }

    fn stage(&self) -> usize {
        self.stage
    }

    fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    fn last_state(&self) -> Option<&FilterState> {
        self.trace.last().map(|r| &r.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::Ekf;
    use crate::psd::GaussianLaw;
    use crate::systems::{AffineSystem, CoordinatedTurn};

    fn law(d: &[f64]) -> GaussianLaw {
        GaussianLaw::centered(PsdMatrix::from_diagonal(d).unwrap())
    }

    fn ct_nominal() -> NoiseModel {
        NoiseModel {
            x0: GaussianLaw::new(
                DVector::from_column_slice(&[0.0, 0.0, 2.0, 0.0, 0.3]),
                PsdMatrix::from_diagonal(&[0.004, 0.004, 0.025, 0.025, 0.00025]).unwrap(),
            )
            .unwrap(),
            w: law(&[1e-5, 1e-5, 0.00025, 0.00025, 4e-5]),
            v: law(&[1e-5, 0.025]),
        }
    }

    #[test]
    fn init_state() {
        let sys = CoordinatedTurn::new(0.2).unwrap();
        let nominal = ct_nominal();
        let f = drekf_init(&sys, nominal.clone(), DrEkfConfig::new(0.001, sys.curvature)).unwrap();
        assert_eq!(f.rho_prior(), 0.0);
        assert_eq!(f.stage(), 0);
        assert_eq!(f.prior_mean(), nominal.x0.mean());
        assert!(f.trace().is_empty());
    }

    #[test]
    fn strict_mode_needs_envelopes() {
        let sys = CoordinatedTurn::new(0.2).unwrap();
        let mut cfg = DrEkfConfig::new(0.001, sys.curvature);
        cfg.envelopes = EnvelopeMode::Strict(EnvelopeSequences {
            a: alloc::vec![],
            m: alloc::vec![1.0],
            k: alloc::vec![1.0],
        });
        assert!(matches!(drekf_init(&sys, ct_nominal(), cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn ct_stage_zero_radius() {
        let sys = CoordinatedTurn::new(0.2).unwrap();
        // start away from the sensor so range-bearing is regular
        let mut nominal = ct_nominal();
        nominal.x0 = GaussianLaw::new(
            DVector::from_column_slice(&[10.0, 5.0, 2.0, 0.0, 0.3]),
            nominal.x0.cov().clone(),
        )
        .unwrap();
        let mut f = drekf_init(&sys, nominal, DrEkfConfig::new(0.001, sys.curvature)).unwrap();
        f.update(&DVector::from_column_slice(&[11.2, 0.46])).unwrap();
        let c = f.trace()[0].certificate;
        let gamma0 = 0.05825f64.sqrt() + 0.001;
        assert!((c.gamma - gamma0).abs() < 1e-12);
        assert!((c.gamma - 0.2423504).abs() < 1e-7);
        let expected = 0.001 + 0.1 * 3f64.sqrt() * gamma0 * gamma0;
        assert!((c.theta_eff() - expected).abs() < 1e-12);
        assert!((c.theta_eff() - 0.011172).abs() < 1e-4);
        assert_eq!(c.rho_prior, 0.0);
        assert_eq!(c.radius.residual_f, 0.0);
    }

    #[test]
    fn reduces_to_ekf_on_linear_system() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.95]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let sys = AffineSystem::linear(a, h).unwrap();
        let nominal = NoiseModel {
            x0: law(&[1.0, 0.5]),
            w: law(&[0.01, 0.02]),
            v: law(&[0.1]),
        };
        let mut dr = drekf_init(&sys, nominal.clone(), DrEkfConfig::new(0.0, sys.curvature())).unwrap();
        let mut ekf = Ekf::new(&sys, nominal);
        let u = DVector::zeros(0);
        for t in 0..20 {
            let y = DVector::from_element(1, (t as f64 * 0.3).sin());
            let s1 = dr.step(&y, &u).unwrap();
            let s2 = ekf.step(&y, &u).unwrap();
            assert!((&s1.posterior_mean - &s2.posterior_mean).norm() < 1e-8);
            assert!((s1.posterior_cov.as_matrix() - s2.posterior_cov.as_matrix()).norm() < 1e-8);
            let c = dr.trace()[t].certificate;
            assert_eq!(c.rho, 0.0);
            assert_eq!(c.vbar, c.sbar);
            assert_eq!(c.theta_eff(), 0.0);
        }
    }

    #[test]
    fn update_predict_order_enforced() {
        let sys = AffineSystem::linear(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let nominal = NoiseModel {
            x0: law(&[1.0]),
            w: law(&[1.0]),
            v: law(&[1.0]),
        };
        let mut f = drekf_init(&sys, nominal, DrEkfConfig::new(0.1, sys.curvature())).unwrap();
        let u = DVector::zeros(0);
        assert!(f.predict(&u).is_err());
        assert!(f.update(&DVector::from_element(1, f64::NAN)).is_err());
        f.update(&DVector::from_element(1, 0.0)).unwrap();
        assert!(f.update(&DVector::from_element(1, 0.0)).is_err());
    }
}
