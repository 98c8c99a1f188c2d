use drekf_sim::config::{apply_override, parse_table, raw_from_table, template, to_toml_string};
use drekf_sim::metrics::{mean_std, spearman};
use proptest::prelude::*;

fn distinct(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-1000i32..1000, n..=n)
        .prop_map(|s| s.into_iter().map(f64::from).collect::<Vec<_>>())
        .prop_shuffle()
}

proptest! {
    #[test]
    fn spearman_is_bounded_and_rank_invariant(pair in (3usize..20).prop_flat_map(|n| (distinct(n), distinct(n)))) {
        let (x, y) = pair;
        let r = spearman(&x, &y);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v + 3.0).collect();
        prop_assert!((spearman(&cubed, &y) - r).abs() <= 1e-12);
        prop_assert!((spearman(&x, &x) - 1.0).abs() <= 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((spearman(&neg, &y) + r).abs() <= 1e-12);
    }

    #[test]
    fn mean_std_shift_and_scale(v in prop::collection::vec(-100.0..100.0f64, 2..40), shift in -50.0..50.0f64, scale in 0.1..10.0f64) {
        let (m, s) = mean_std(&v);
        let moved: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
        let (m2, s2) = mean_std(&moved);
        prop_assert!((m2 - (m * scale + shift)).abs() <= 1e-9 * (1.0 + m2.abs()));
        prop_assert!((s2 - s * scale).abs() <= 1e-9 * (1.0 + s2));
    }

    #[test]
    fn overridden_config_echo_round_trips(theta in 0.0..1.0f64, runs in 1usize..500, omega in -0.6..0.6f64) {
        let mut t = parse_table(template("ct_tracking").unwrap()).unwrap();
        apply_override(&mut t, "drekf.theta", &format!("{theta:?}")).unwrap();
        apply_override(&mut t, "runs", &runs.to_string()).unwrap();
        apply_override(&mut t, "omega0", &format!("{omega:?}")).unwrap();
        let raw = raw_from_table(&t).unwrap();
        let echoed = to_toml_string(&raw).unwrap();
        let again = raw_from_table(&parse_table(&echoed).unwrap()).unwrap();
        prop_assert_eq!(raw, again);
    }
}
