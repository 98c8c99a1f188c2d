use drekf_core::ambiguity::{effective_radius, CurvatureConstants, NominalStackedNoise};
use drekf_core::filter::{drekf_init, DrEkfConfig, Ekf, Estimator, NoiseModel};
use drekf_core::mpc::{safety_margin, solve_mpc, MpcConfig, Obstacle};
use drekf_core::psd::{bures_distance, matrix_sqrt, GaussianLaw, PsdMatrix};
use drekf_core::sdp::{build_stage_problem, kalman_solution, solve_stage_sdp};
use drekf_core::systems::{finite_difference_jacobian, AffineSystem, CoordinatedTurn, NonlinearSystem, Unicycle};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spd(dim: usize, entries: &[f64], floor: f64) -> PsdMatrix {
    let b = DMatrix::from_fn(dim, dim, |i, j| entries[(i * dim + j) % entries.len()]);
    PsdMatrix::new(&b * b.transpose() + DMatrix::identity(dim, dim) * floor).unwrap()
}

fn spd_strategy(max_dim: usize) -> impl Strategy<Value = PsdMatrix> {
    (1..=max_dim).prop_flat_map(|d| {
        (Just(d), prop::collection::vec(-1.0..1.0f64, d * d), 0.01..1.0f64).prop_map(|(d, e, f)| spd(d, &e, f))
    })
}

fn same_dim_triple() -> impl Strategy<Value = (PsdMatrix, PsdMatrix, PsdMatrix)> {
    (1..=5usize).prop_flat_map(|d| {
        let m = || (prop::collection::vec(-1.0..1.0f64, d * d), 0.01..1.0f64);
        (Just(d), m(), m(), m()).prop_map(|(d, a, b, c)| (spd(d, &a.0, a.1), spd(d, &b.0, b.1), spd(d, &c.0, c.1)))
    })
}

fn diag(v: &[f64]) -> PsdMatrix {
    PsdMatrix::from_diagonal(v).unwrap()
}

fn affine_case() -> impl Strategy<Value = (AffineSystem, NoiseModel)> {
    (1..=4usize, 1..=3usize).prop_flat_map(|(nx, ny)| {
        (
            prop::collection::vec(-0.8..0.8f64, nx * nx),
            prop::collection::vec(-1.0..1.0f64, ny * nx),
            prop::collection::vec(0.05..1.0f64, nx),
            prop::collection::vec(0.05..1.0f64, nx),
            prop::collection::vec(0.05..1.0f64, ny),
        )
            .prop_map(move |(a, h, p0, w, v)| {
                let sys = AffineSystem::linear(
                    DMatrix::from_row_slice(nx, nx, &a),
                    DMatrix::from_row_slice(ny, nx, &h),
                )
                .unwrap();
                let model = NoiseModel {
                    x0: GaussianLaw::new(DVector::from_element(nx, 0.5), diag(&p0)).unwrap(),
                    w: GaussianLaw::centered(diag(&w)),
                    v: GaussianLaw::centered(diag(&v)),
                };
                (sys, model)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bures_is_symmetric_and_zero_on_diagonal((a, b, _) in same_dim_triple()) {
        let ab = bures_distance(&a, &b).unwrap();
        let ba = bures_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        prop_assert!(bures_distance(&a, &a).unwrap() <= 1e-6);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn bures_triangle_inequality((a, b, c) in same_dim_triple()) {
        let ab = bures_distance(&a, &b).unwrap();
        let bc = bures_distance(&b, &c).unwrap();
        let ac = bures_distance(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-8);
    }

    #[test]
    fn matrix_sqrt_round_trip(a in spd_strategy(12)) {
        let r = matrix_sqrt(&a);
        let rm = r.as_matrix();
        prop_assert!((rm - rm.transpose()).norm() <= 1e-12 * (1.0 + rm.norm()));
        prop_assert!(r.min_eigenvalue() >= -1e-12);
        let err = (rm * rm - a.as_matrix()).norm();
        prop_assert!(err <= 1e-10 * a.as_matrix().norm().max(1.0), "err {err}");
    }

    #[test]
    fn effective_radius_monotone(g1 in 0.0..5.0f64, dg in 0.0..2.0f64, ef in 0.0..1.0f64, th in 0.0..1.0f64, dth in 0.0..1.0f64) {
        let k = CurvatureConstants::with_default_alpha(0.3, 0.5).unwrap();
        let base = effective_radius(g1, ef, th, &k).unwrap().effective;
        prop_assert!(effective_radius(g1 + dg, ef, th, &k).unwrap().effective >= base);
        prop_assert!(effective_radius(g1, ef, th + dth, &k).unwrap().effective >= base);
        prop_assert!(base >= th);
    }

    #[test]
    fn sdp_objective_nondecreasing_in_radius(
        w in prop::collection::vec(0.1..1.0f64, 2),
        v in 0.1..1.0f64,
        c in prop::collection::vec(-1.0..1.0f64, 2),
        r1 in 0.01..0.5f64,
        dr in 0.01..0.5f64,
    ) {
        let nominal = NominalStackedNoise::centered(diag(&w), diag(&[v])).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]);
        let cm = DMatrix::from_row_slice(1, 2, &c);
        let post = PsdMatrix::identity(2);
        let solve = |r: f64| {
            let p = build_stage_problem(Some(&a), &cm, Some(&post), &nominal, r, false).unwrap();
            solve_stage_sdp(&p, 1e-9, 5000).unwrap().objective
        };
        let p0 = build_stage_problem(Some(&a), &cm, Some(&post), &nominal, 0.0, false).unwrap();
        let f0 = kalman_solution(&p0).unwrap().objective;
        let (f1, f2) = (solve(r1), solve(r1 + dr));
        prop_assert!(f1 >= f0 - 1e-7 * (1.0 + f0));
        prop_assert!(f2 >= f1 - 1e-7 * (1.0 + f1), "{f1} > {f2}");
    }

    #[test]
    fn filter_reduces_to_ekf_without_radius_or_curvature((sys, model) in affine_case(), ys in prop::collection::vec(-2.0..2.0f64, 24)) {
        let ny = sys.meas_dim();
        let mut ekf = Ekf::new(&sys, model.clone());
        let mut dr = drekf_init(&sys, model, DrEkfConfig::new(0.0, CurvatureConstants::zero())).unwrap();
        let u = DVector::zeros(0);
        for t in 0..6 {
            let y = DVector::from_fn(ny, |i, _| ys[(t * ny + i) % ys.len()]);
            let a = ekf.step(&y, &u).unwrap();
            let b = dr.step(&y, &u).unwrap();
            prop_assert!((&a.posterior_mean - &b.posterior_mean).amax() <= 1e-8);
            prop_assert!((a.posterior_cov.as_matrix() - b.posterior_cov.as_matrix()).amax() <= 1e-8);
        }
        for rec in dr.trace() {
            prop_assert_eq!(rec.certificate.rho, 0.0);
            prop_assert!((rec.certificate.vbar - rec.certificate.sbar).abs() <= 1e-12);
        }
    }

    #[test]
    fn posterior_bound_is_envelope_plus_residual((sys, model) in affine_case(), th in 0.0..0.3f64) {
        let k = CurvatureConstants::with_default_alpha(0.1, 0.1).unwrap();
        let mut dr = drekf_init(&sys, model, DrEkfConfig::new(th, k)).unwrap();
        let y = DVector::from_element(sys.meas_dim(), 0.3);
        let u = DVector::zeros(0);
        for _ in 0..3 {
            if dr.step(&y, &u).is_err() {
                break;
            }
        }
        for rec in dr.trace() {
            let c = rec.certificate;
            prop_assert!(c.rho >= 0.0);
            prop_assert!((c.vbar - (c.sbar + c.rho)).abs() <= 1e-12 * (1.0 + c.vbar));
        }
    }

    #[test]
    fn ct_jacobians_match_finite_differences(
        p in prop::collection::vec(-50.0..50.0f64, 2),
        v in prop::collection::vec(-5.0..5.0f64, 2),
        w in -1.0..1.0f64,
    ) {
        prop_assume!(p[0].hypot(p[1]) > 1.0);
        let sys = CoordinatedTurn::new(0.2).unwrap();
        let x = DVector::from_vec(vec![p[0], p[1], v[0], v[1], w]);
        let u = DVector::zeros(0);
        let fd = finite_difference_jacobian(|z| sys.dynamics(z, &u), &x, 1e-6);
        prop_assert!((sys.dynamics_jacobian(&x, &u) - fd).amax() <= 1e-6);
        let fd = finite_difference_jacobian(|z| sys.measure(z).unwrap(), &x, 1e-6);
        prop_assert!((sys.measurement_jacobian(&x).unwrap() - fd).amax() <= 1e-6);
    }

    #[test]
    fn unicycle_jacobians_match_finite_differences(
        p in prop::collection::vec(-3.0..11.0f64, 2),
        psi in -3.0..3.0f64,
        u in prop::collection::vec(-1.5..1.5f64, 2),
    ) {
        let sys = Unicycle::new(0.2, vec![[0.0, 5.0], [8.0, 5.0], [4.0, -5.0]]).unwrap();
        let x = DVector::from_vec(vec![p[0], p[1], psi]);
        let u = DVector::from_vec(u);
        let fd = finite_difference_jacobian(|z| sys.dynamics(z, &u), &x, 1e-6);
        prop_assert!((sys.dynamics_jacobian(&x, &u) - fd).amax() <= 1e-6);
        let fd = finite_difference_jacobian(|z| sys.measure(z).unwrap(), &x, 1e-6);
        prop_assert!((sys.measurement_jacobian(&x).unwrap() - fd).amax() <= 1e-6);
    }

    #[test]
    fn safety_margin_grows_with_covariance(d in prop::collection::vec(0.0..1.0f64, 3), s in 1.0..4.0f64, k in 0.5..3.0f64) {
        let small = safety_margin(&diag(&d), k).unwrap();
        let large = safety_margin(&diag(&[d[0] * s, d[1] * s, d[2]]), k).unwrap();
        prop_assert!(large >= small);
        prop_assert!(small >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mpc_respects_input_limits(x in -2.0..6.0f64, y in -2.0..2.0f64, psi in -3.0..3.0f64, delta in 0.0..0.5f64) {
        let cfg = MpcConfig {
            horizon: 8,
            dt: 0.2,
            q: 5.0,
            r_s: 0.5,
            r_omega: 0.5,
            q_f: 20.0,
            s_max: 1.5,
            omega_max: 2.0,
            goal: [8.0, 0.0],
            obstacles: vec![Obstacle { center: [4.0, 0.1], radius: 1.0 }],
            kappa_sigma: 1.645,
            d_min_base: 0.0,
        };
        let sol = solve_mpc(&DVector::from_vec(vec![x, y, psi]), delta, &cfg).unwrap();
        prop_assert_eq!(sol.controls.len(), cfg.horizon);
        for c in &sol.controls {
            prop_assert!(c[0] >= -1e-9 && c[0] <= cfg.s_max + 1e-9, "speed {}", c[0]);
            prop_assert!(c[1].abs() <= cfg.omega_max + 1e-9, "turn rate {}", c[1]);
        }
    }
}

#[test]
fn identical_inputs_give_identical_traces() {
    let sys = CoordinatedTurn::new(0.2).unwrap();
    let model = NoiseModel {
        x0: GaussianLaw::new(DVector::from_vec(vec![10.0, 5.0, 2.0, 0.0, 0.3]), diag(&[0.004, 0.004, 0.025, 0.025, 0.00025])).unwrap(),
        w: GaussianLaw::centered(diag(&[1e-5, 1e-5, 2.5e-4, 2.5e-4, 4e-5])),
        v: GaussianLaw::centered(diag(&[1e-5, 0.025])),
    };
    let run = || {
        let mut cfg = DrEkfConfig::new(0.001, sys.curvature());
        cfg.radius_cap = Some(0.1);
        let mut f = drekf_init(&sys, model.clone(), cfg).unwrap();
        let u = DVector::zeros(0);
        let mut x = model.x0.mean().clone();
        for _ in 0..10 {
            let y = sys.measure(&x).unwrap();
            f.step(&y, &u).unwrap();
            x = sys.dynamics(&x, &u);
        }
        f.into_trace()
    };
    assert_eq!(run(), run());
}
