mod common;

use rdiss::kernel::KernelSpec;
use rdiss::sampler::{regularize, PathSampler};
use rdiss::stats::ScalarMoments;
use rdiss::veps::veps_cumulative;

const TIMES: [f64; 5] = [0.03, 0.1, 0.25, 0.5, 1.0];

#[test]
fn twice_veps_is_the_drive_variance() {
    for h in [0.5, 0.6, 0.75, 0.9] {
        let k = KernelSpec::fbm(h).unwrap();
        for eps in [0.01, 0.05, 0.1] {
            let curve = veps_cumulative(&k, eps, &[0.0, 0.03, 0.1, 0.25, 0.5, 1.0]).unwrap();
            for (i, &t) in TIMES.iter().enumerate() {
                let want = common::regularized_variance(h, eps, t);
                let got = 2.0 * curve.v[i + 1];
                assert!((got - want).abs() < 1e-8 * want.max(1.0), "H={h} ε={eps} t={t}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn sampled_drive_variance_agrees() {
    let (eps, dt, n): (f64, f64, u64) = (0.05, 0.0125, 4000);
    for h in [0.5, 0.75] {
        let k = KernelSpec::fbm(h).unwrap();
        let steps = ((1.0 + eps) / dt).ceil() as usize;
        let sampler = PathSampler::new(&k, dt, steps).unwrap();
        let times = [0.25, 0.5, 1.0];
        let mut acc = [ScalarMoments::default(); 3];
        for r in 0..n {
            let d = regularize(&sampler.sample_replica(17, r, 1), eps, &times).unwrap();
            for (a, g) in acc.iter_mut().zip(&d.g_values[0]) {
                a.push(*g);
            }
        }
        for (a, &t) in acc.iter().zip(&times) {
            let want = common::regularized_variance(h, eps, t);
            let z = (a.variance() - want) / a.variance_se();
            assert!(z.abs() < 3.0, "H={h} t={t}: {} vs {want} (z = {z})", a.variance());
        }
    }
}
