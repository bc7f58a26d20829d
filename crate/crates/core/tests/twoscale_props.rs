use proptest::prelude::*;
use rdiss::kernel::KernelSpec;
use rdiss::twoscale::*;

fn problem(scale: u32, kappa_t: f64) -> TorusProblem {
    TorusProblem {
        n: 64,
        kappa: 0.01,
        kappa_t,
        family: SmallScaleFamily::shell(scale, kappa_t).unwrap(),
        sigmas: vec![[0.5, 0.0], [0.0, 0.5]],
        kernel: KernelSpec::fbm(0.75).unwrap(),
        epsilon: 0.02,
        dt: 2e-3,
        t_final: 0.032,
        datum: TorusField::trig(
            0.1,
            vec![
                TrigTerm { m: [1, 0], cos: 1.0, sin: 0.0 },
                TrigTerm { m: [1, 2], cos: 0.0, sin: 0.5 },
            ],
        ),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shells_are_divergence_free_and_isotropic(scale in 1u32..12, kappa_t in 1e-3f64..1.0, x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let f = SmallScaleFamily::shell(scale, kappa_t).unwrap();
        prop_assert_eq!(f.fourier_divergence(), 0.0);
        let q = f.diagonal([x, y]);
        prop_assert!((q[0][0] - kappa_t).abs() < 1e-10 * kappa_t.max(1.0));
        prop_assert!((q[1][1] - kappa_t).abs() < 1e-10 * kappa_t.max(1.0));
        prop_assert!(q[0][1].abs() < 1e-10);
        prop_assert!((q_operator_norm(&f) - kappa_t / f.modes.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn heat_factor_bounds_each_mode(seed in 0u64..1000) {
        let mut tp = problem(2, 0.02);
        tp.family = SmallScaleFamily::empty();
        let traj = simulate_replica(&tp, seed, 0, 0).unwrap();
        let t = *traj.times.last().unwrap();
        let base = tp.datum.spectrum(tp.n);
        for ((i, j), z) in traj.last().indexed_iter() {
            let m = [i as i64 - if i >= 32 { 64 } else { 0 }, j as i64 - if j >= 32 { 64 } else { 0 }];
            let lam = (2.0 * std::f64::consts::PI).powi(2) * (m[0] * m[0] + m[1] * m[1]) as f64;
            let want = base[[i, j]].norm() * (-(tp.kappa + tp.kappa_t) * lam * t).exp();
            prop_assert!((z.norm() - want).abs() < 1e-13);
        }
    }
}

#[test]
fn mean_energy_does_not_grow() {
    let tp = problem(4, 0.02);
    let e = energy_check(&tp, 96, 5).unwrap();
    assert!(e.mean_final <= e.initial + 3.0 * e.se, "{e:?}");
}

#[test]
fn mean_field_follows_full_corrector() {
    let tp = problem(4, 0.02);
    let m = mean_field_check(&tp, 128, 8).unwrap();
    assert!(m.distance <= 3.0 * m.se + 1e-3, "{m:?}");
    assert!(m.distance_half > m.distance, "{m:?}");
}

#[test]
fn strong_self_convergence_is_half_order() {
    let tp = problem(4, 0.02);
    let sc = self_convergence(&tp, 12, 3, 3).unwrap();
    for w in sc.differences.windows(2) {
        assert!(w[1] < w[0], "{sc:?}");
    }
    let mean_order = sc.orders.iter().sum::<f64>() / sc.orders.len() as f64;
    assert!((0.35..0.8).contains(&mean_order), "{sc:?}");
}

#[test]
fn bound_tracks_shell_size() {
    let phi = TorusField::trig(0.0, vec![TrigTerm { m: [1, 0], cos: 1.0, sin: 0.0 }]);
    let a = theorem_bound_check(&problem(3, 0.02), 48, 2, &phi).unwrap();
    let b = theorem_bound_check(&problem(6, 0.02), 48, 2, &phi).unwrap();
    assert!(a.pass && b.pass);
    assert!(b.lhs < a.lhs / 1.5, "{} {}", a.lhs, b.lhs);
    let mut sink = Vec::new();
    a.write_ndjson(&mut sink).unwrap();
    assert_eq!(String::from_utf8(sink).unwrap().lines().count(), 48);
    let mut table = Vec::new();
    write_bound_table(&[a, b], &mut table).unwrap();
    assert!(String::from_utf8(table).unwrap().starts_with("N,lhs,rhs,se,budget,lhs_half,pass"));
}
