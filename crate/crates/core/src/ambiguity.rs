//! Stage-wise Wasserstein ambiguity sets over the stacked noise and the
//! computable radius enlargement that absorbs linearization residuals.
//!
//! The stacked noise at stage `t` is `[w_{t-1}; v_t]` for `t ≥ 1` and
//! `[x_0; v_0]` at `t = 0`. Its nominal law is Gaussian with independent
//! blocks. The true residual magnitudes (`η^f`, `η^h` and the resulting
//! oracle radius) depend on unknown error moments and are never evaluated
//! here; only their computable upper bounds are.

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::psd::{block_diag, gelbrich_distance, min_eigenvalue, GaussianLaw, PsdMatrix};

/// Nominal Gaussian law of the stacked noise with block-diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct NominalStackedNoise {
    mean: DVector<f64>,
    first_cov: PsdMatrix,
    meas_cov: PsdMatrix,
    cov: DMatrix<f64>,
    lambda_floor: f64,
}

impl NominalStackedNoise {
    /// `first` is the process-noise law (or the initial-state law at stage 0),
    /// `meas` the measurement-noise law. Both covariances must be positive definite.
    pub fn new(first: &GaussianLaw, meas: &GaussianLaw) -> Result<Self> {
        let cov = block_diag(first.cov().as_matrix(), meas.cov().as_matrix());
        let lambda_floor = min_eigenvalue(&cov);
        if lambda_floor <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: lambda_floor,
            });
        }
        let n_x = first.dim();
        let mut mean = DVector::zeros(n_x + meas.dim());
        mean.rows_mut(0, n_x).copy_from(first.mean());
        mean.rows_mut(n_x, meas.dim()).copy_from(meas.mean());
        Ok(NominalStackedNoise {
            mean,
            first_cov: first.cov().clone(),
            meas_cov: meas.cov().clone(),
            cov,
            lambda_floor,
        })
    }

    /// Zero-mean variant.
    pub fn centered(first_cov: PsdMatrix, meas_cov: PsdMatrix) -> Result<Self> {
        NominalStackedNoise::new(&GaussianLaw::centered(first_cov), &GaussianLaw::centered(meas_cov))
    }

    /// Split index: dimension of the first (state-sized) block.
    pub fn n_x(&self) -> usize {
        self.first_cov.dim()
    }

    pub fn n_y(&self) -> usize {
        self.meas_cov.dim()
    }

    pub fn dim(&self) -> usize {
        self.n_x() + self.n_y()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Σ̂_ε, the full stacked covariance.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Σ̂_{w,t-1} (or Σ̂⁻_{x,0} at the initial stage).
    pub fn first_cov(&self) -> &PsdMatrix {
        &self.first_cov
    }

    /// Σ̂_{v,t}.
    pub fn meas_cov(&self) -> &PsdMatrix {
        &self.meas_cov
    }

    /// Nominal mean of the first block (ŵ_{t-1}, or x̂⁻_0 at stage 0).
    pub fn first_mean(&self) -> DVector<f64> {
        self.mean.rows(0, self.n_x()).into_owned()
    }

    /// Nominal measurement-noise mean v̂_t.
    pub fn meas_mean(&self) -> DVector<f64> {
        self.mean.rows(self.n_x(), self.n_y()).into_owned()
    }

    /// λ_min(Σ̂_ε) > 0.
    pub fn lambda_floor(&self) -> f64 {
        self.lambda_floor
    }

    pub fn as_law(&self) -> GaussianLaw {
        // cov is PD by construction
        GaussianLaw::new(self.mean.clone(), PsdMatrix::new(self.cov.clone()).expect("nominal cov is PD"))
            .expect("dims match")
    }
}

/// Nominal radius together with its computable residual enlargement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AmbiguityRadius {
    pub nominal: f64,
    /// η̄ᶠ_{t-1}
    pub residual_f: f64,
    /// η̄ʰ_t
    pub residual_h: f64,
    /// θ̄ᵉᶠᶠ = θ + sqrt(η̄ᶠ² + η̄ʰ²)
    pub effective: f64,
}

/// Curvature (Lipschitz-Jacobian) and fourth-moment constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvatureConstants {
    pub lf: f64,
    pub lh: f64,
    pub alpha_f: f64,
    pub alpha_h: f64,
}

/// √3, the Gaussian kurtosis bound used for both fourth-moment constants.
pub const DEFAULT_ALPHA: f64 = 1.732_050_807_568_877_2;

impl CurvatureConstants {
    pub fn new(lf: f64, lh: f64, alpha_f: f64, alpha_h: f64) -> Result<Self> {
        let c = CurvatureConstants {
            lf,
            lh,
            alpha_f,
            alpha_h,
        };
        c.validate()?;
        Ok(c)
    }

    /// Curvature constants with α_f = α_h = √3.
    pub fn with_default_alpha(lf: f64, lh: f64) -> Result<Self> {
        CurvatureConstants::new(lf, lh, DEFAULT_ALPHA, DEFAULT_ALPHA)
    }

    /// Affine models: no residuals at all.
    pub fn zero() -> Self {
        CurvatureConstants {
            lf: 0.0,
            lh: 0.0,
            alpha_f: DEFAULT_ALPHA,
            alpha_h: DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lf, "L_f"),
            (self.lh, "L_h"),
            (self.alpha_f, "alpha_f"),
            (self.alpha_h, "alpha_h"),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
            if v < 0.0 {
                return Err(Error::NegativeInput(name));
            }
        }
        Ok(())
    }

    /// η̄ᶠ = (L_f/2)·α_f·V̄².
    pub fn residual_f(&self, vbar: f64) -> f64 {
        0.5 * self.lf * self.alpha_f * vbar * vbar
    }

    /// η̄ʰ = (L_h/2)·α_h·γ².
    pub fn residual_h(&self, gamma: f64) -> f64 {
        0.5 * self.lh * self.alpha_h * gamma * gamma
    }
}

fn check_nonneg(v: f64, name: &'static str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite(name));
    }
    if v < 0.0 {
        return Err(Error::NegativeInput(name));
    }
    Ok(())
}

/// Prior second-moment bound γ_t and the process residual bound η̄ᶠ_{t-1}.
///
/// At the initial stage `γ_0 = sqrt(Tr Σ̂⁻_{x,0}) + θ` and η̄ᶠ_{-1} = 0; the
/// posterior bound and envelope arguments are ignored. Otherwise
/// `γ_t = ā·V̄ + sqrt(Tr Σ̂_w) + θ + η̄ᶠ` with `η̄ᶠ = (L_f/2)·α_f·V̄²`.
pub fn prior_moment_bound(
    prev_posterior_bound: f64,
    envelope_a: f64,
    nominal: &NominalStackedNoise,
    radius_nominal: f64,
    curvature: &CurvatureConstants,
    is_initial: bool,
) -> Result<(f64, f64)> {
    check_nonneg(radius_nominal, "nominal radius")?;
    curvature.validate()?;
    let root_trace = nominal.first_cov().trace().max(0.0).sqrt();
    if is_initial {
        return Ok((root_trace + radius_nominal, 0.0));
    }
    check_nonneg(prev_posterior_bound, "posterior bound V̄")?;
    check_nonneg(envelope_a, "envelope ā")?;
    let eta_f = curvature.residual_f(prev_posterior_bound);
    let gamma = envelope_a * prev_posterior_bound + root_trace + radius_nominal + eta_f;
    Ok((gamma, eta_f))
}

/// Computable effective radius θ̄ᵉᶠᶠ = θ + sqrt(η̄ᶠ² + η̄ʰ²), η̄ʰ = (L_h/2)·α_h·γ².
pub fn effective_radius(
    gamma: f64,
    residual_f: f64,
    radius_nominal: f64,
    curvature: &CurvatureConstants,
) -> Result<AmbiguityRadius> {
    check_nonneg(gamma, "gamma")?;
    check_nonneg(residual_f, "eta_f")?;
    check_nonneg(radius_nominal, "nominal radius")?;
    curvature.validate()?;
    let residual_h = curvature.residual_h(gamma);
    let effective = radius_nominal + residual_f.hypot(residual_h);
    Ok(AmbiguityRadius {
        nominal: radius_nominal,
        residual_f,
        residual_h,
        effective,
    })
}

/// Exact ball membership for a Gaussian candidate: Gelbrich(candidate, nominal) ≤ radius + tol.
pub fn wasserstein_feasibility_check(
    candidate: &GaussianLaw,
    nominal: &NominalStackedNoise,
    radius: f64,
    tol: f64,
) -> Result<bool> {
    check_nonneg(radius, "radius")?;
    if candidate.dim() != nominal.dim() {
        return Err(Error::DimensionMismatch {
            context: "wasserstein_feasibility_check",
            expected: nominal.dim(),
            found: candidate.dim(),
        });
    }
    Ok(gelbrich_distance(candidate, &nominal.as_law())? <= radius + tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn diag(d: &[f64]) -> PsdMatrix {
        PsdMatrix::from_diagonal(d).unwrap()
    }

    fn safe_nav_initial() -> NominalStackedNoise {
        NominalStackedNoise::centered(
            diag(&[0.01, 0.01, 0.001]),
            diag(&[0.005, 0.005, 0.005, 0.0075]),
        )
        .unwrap()
    }

    #[test]
    fn rejects_singular_nominal() {
        let r = NominalStackedNoise::centered(diag(&[1.0, 0.0]), diag(&[1.0]));
        assert!(matches!(r, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn stacked_structure() {
        let n = safe_nav_initial();
        assert_eq!((n.n_x(), n.n_y(), n.dim()), (3, 4, 7));
        assert_eq!(n.cov()[(0, 5)], 0.0);
        assert_relative_eq!(n.lambda_floor(), 0.001, epsilon = 1e-15);
    }

    #[test]
    fn gamma_zero_for_safe_nav() {
        let c = CurvatureConstants::with_default_alpha(0.3, 0.5).unwrap();
        let (g, ef) = prior_moment_bound(0.0, 0.0, &safe_nav_initial(), 0.25, &c, true).unwrap();
        assert_relative_eq!(g, 0.021f64.sqrt() + 0.25, epsilon = 1e-15);
        assert!((g - 0.394914).abs() < 1e-6);
        assert_eq!(ef, 0.0);
    }

    #[test]
    fn curvature_free_prior_bound() {
        let n = NominalStackedNoise::centered(diag(&[1e-300]), diag(&[1.0])).unwrap();
        let c = CurvatureConstants::with_default_alpha(0.0, 0.0).unwrap();
        let (g, ef) = prior_moment_bound(5.0, 1.0, &n, 0.0, &c, false).unwrap();
        assert_relative_eq!(g, 5.0, epsilon = 1e-12);
        assert_eq!(ef, 0.0);
    }

    #[test]
    fn prior_bound_arithmetic() {
        let n = NominalStackedNoise::centered(diag(&[1.0]), diag(&[1.0])).unwrap();
        let c = CurvatureConstants::with_default_alpha(0.3, 0.0).unwrap();
        let (g, ef) = prior_moment_bound(1.0, 1.0, &n, 0.1, &c, false).unwrap();
        assert_relative_eq!(ef, 0.15 * 3f64.sqrt(), epsilon = 1e-14);
        assert!((ef - 0.259808).abs() < 1e-6);
        assert!((g - 2.359808).abs() < 1e-6);
    }

    #[test]
    fn negative_inputs_rejected() {
        let c = CurvatureConstants::zero();
        let n = safe_nav_initial();
        assert!(prior_moment_bound(-1.0, 1.0, &n, 0.1, &c, false).is_err());
        assert!(prior_moment_bound(1.0, 1.0, &n, -0.1, &c, false).is_err());
        assert!(effective_radius(-1.0, 0.0, 0.0, &c).is_err());
        assert!(CurvatureConstants::new(-0.1, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn effective_radius_cases() {
        let c = CurvatureConstants::zero();
        assert_eq!(effective_radius(3.0, 0.0, 0.2, &c).unwrap().effective, 0.2);
        assert_eq!(effective_radius(0.0, 0.0, 0.0, &c).unwrap().effective, 0.0);

        let c = CurvatureConstants::with_default_alpha(0.3, 0.5).unwrap();
        let g0 = 0.021f64.sqrt() + 0.25;
        let r = effective_radius(g0, 0.0, 0.25, &c).unwrap();
        let expected_h = 0.25 * 3f64.sqrt() * g0 * g0;
        assert_relative_eq!(r.residual_h, expected_h, epsilon = 1e-15);
        assert!((r.residual_h - 0.06753).abs() < 1e-5);
        assert!((r.effective - 0.3175).abs() < 1e-4);
    }

    #[test]
    fn feasibility_membership() {
        let n = NominalStackedNoise::centered(diag(&[1.0]), diag(&[1.0])).unwrap();
        let law = n.as_law();
        assert!(wasserstein_feasibility_check(&law, &n, 0.0, 1e-9).unwrap());

        let one_d = NominalStackedNoise::new(
            &GaussianLaw::centered(diag(&[1.0])),
            &GaussianLaw::centered(diag(&[1.0])),
        )
        .unwrap();
        // stretch only the first coordinate: 𝒩(0,4) vs 𝒩(0,1) in that block
        let cand = GaussianLaw::centered(diag(&[4.0, 1.0]));
        assert!(wasserstein_feasibility_check(&cand, &one_d, 1.0, 1e-9).unwrap());
        assert!(!wasserstein_feasibility_check(&cand, &one_d, 0.5, 1e-9).unwrap());
        let wrong = GaussianLaw::centered(diag(&[1.0]));
        assert!(wasserstein_feasibility_check(&wrong, &one_d, 1.0, 1e-9).is_err());
    }

    #[test]
    fn perturbation_leaves_zero_ball() {
        let n = safe_nav_initial();
        let mut delta = 1e-6;
        let mut left = false;
        while delta < 1.0 {
            let cov = n.cov() + DMatrix::identity(7, 7) * delta;
            let cand = GaussianLaw::centered(PsdMatrix::new(cov).unwrap());
            if !wasserstein_feasibility_check(&cand, &n, 0.0, 1e-9).unwrap() {
                left = true;
                break;
            }
            delta *= 10.0;
        }
        assert!(left);
    }
}
