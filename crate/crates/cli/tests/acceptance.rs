//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdiss::ensemble::{mc_variance_field, run_ensemble, Observables};
use rdiss::kernel::KernelSpec;
use rdiss::moments::{cov_closed, cov_ode, log_times, mean_closed, smalltime_exponents, variance_dual, variance_pde_residual};
use rdiss::sampler::{regularize, PathSampler};
use rdiss::spectral::{InitialDatum, Lattice, SpectralProblem, Vec2};
use rdiss::stats::ScalarMoments;
use rdiss::twoscale::{theorem_bound_check, SmallScaleFamily, TorusField, TorusProblem, TrigTerm};
use rdiss::veps::{uniform_grid, veps_cumulative};
use rdiss_cli::{load_config, parse_config, run, RunOptions};
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = fn() -> Outcome;

fn kernel_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut track = |label: &str, got: f64, want: f64| {
        let err = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(err);
        if err > 1e-8 {
            failures.push(format!("{label}: {got} vs {want}"));
        }
    };
    let interval = |rng: &mut ChaCha8Rng| {
        let mut p = [0.0; 4].map(|_| rng.random::<f64>() * 3.0);
        p[..2].sort_by(f64::total_cmp);
        p[2..].sort_by(f64::total_cmp);
        ((p[0], p[1]), (p[2], p[3]))
    };
    for _ in 0..50 {
        let k = KernelSpec::bm();
        let ((a, b), (c, d)) = interval(&mut rng);
        track("bm increment", k.increment_cov((a, b), (c, d)).unwrap(), common::bm_increment_cov(a, b, c, d));
        track("bm cov_r", k.cov_r(b, d).unwrap(), common::bm_increment_cov(0.0, b, 0.0, d));
        track("bm gamma", k.gamma(b).unwrap(), b);
        track("bm dgamma", k.dgamma(b).unwrap(), 1.0);
    }
    for _ in 0..50 {
        let h = 0.55 + 0.4 * rng.random::<f64>();
        let k = KernelSpec::fbm(h).unwrap();
        let ((a, b), (c, d)) = interval(&mut rng);
        let t = b.max(1e-3);
        track("fbm increment", k.increment_cov((a, b), (c, d)).unwrap(), common::fbm_increment_cov_quad(h, (a, b), (c, d)));
        track("fbm cov_r", k.cov_r(b, d).unwrap(), common::fbm_increment_cov_quad(h, (0.0, b), (0.0, d)));
        track("fbm gamma", k.gamma(t).unwrap(), common::fbm_increment_cov_quad(h, (0.0, t), (0.0, t)));
        // density of the double integral along its diagonal edge
        let dq = 2.0 * h * (2.0 * h - 1.0) * common::tanh_sinh(|v: f64| v.powf(2.0 * h - 2.0), 0.0, t);
        track("fbm dgamma", k.dgamma(t).unwrap(), dq);
    }
    for _ in 0..50 {
        let h = 0.55 + 0.4 * rng.random::<f64>();
        let lambda = 0.2 + 3.0 * rng.random::<f64>();
        let alpha = 0.3 + 2.0 * rng.random::<f64>();
        let k = KernelSpec::damped_fbm(h, lambda, alpha).unwrap();
        let ((a, b), (c, d)) = interval(&mut rng);
        let g = |x: f64| common::damped_gamma(h, lambda, alpha, x.abs());
        let t = b.max(1e-3);
        track("damped gamma", k.gamma(t).unwrap(), g(t));
        track("damped dgamma", k.dgamma(t).unwrap(), common::damped_dgamma(h, lambda, alpha, t));
        track("damped cov_r", k.cov_r(b, d).unwrap(), 0.5 * (g(b) + g(d) - g(b - d)));
        track(
            "damped increment",
            k.increment_cov((a, b), (c, d)).unwrap(),
            0.5 * (g(d - a) + g(c - b) - g(c - a) - g(d - b)),
        );
    }
    let n = failures.len();
    outcome(
        n == 0,
        format!("150 cases x 4 functions, worst relative error {worst:.1e}{}", failures.first().map(|f| format!("; first failure {f}")).unwrap_or_default()),
    )
}

fn veps_convergence() -> Outcome {
    let grid = uniform_grid(1.0, 900);
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [KernelSpec::bm(), KernelSpec::fbm(0.75).unwrap()] {
        let devs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&e| veps_cumulative(&k, e, &grid).unwrap().sup_deviation(0.1, 1.0).unwrap())
            .collect();
        let monotone = devs.windows(2).all(|w| w[1] < w[0]);
        ok &= monotone && devs[2] <= 0.01;
        parts.push(format!("{}: {:.2e} {:.2e} {:.2e}", k.label(), devs[0], devs[1], devs[2]));
    }
    let mut plateau: f64 = 0.0;
    for e in [0.1, 0.05, 0.025] {
        let c = veps_cumulative(&KernelSpec::bm(), e, &grid).unwrap();
        for (t, v) in c.t_grid.iter().zip(&c.vdot) {
            if *t >= 2.0 * e {
                plateau = plateau.max((v - 0.5).abs());
            }
        }
    }
    ok &= plateau <= 1e-10;
    outcome(ok, format!("sup|V-γ/2| on [0.1,1] {}; BM plateau error {plateau:.1e}", parts.join("; ")))
}

fn variance_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let times = [0.03, 0.1, 0.25, 0.5, 1.0];
    for h in [0.5, 0.6, 0.75, 0.9] {
        let k = KernelSpec::fbm(h).unwrap();
        for eps in [0.01, 0.05, 0.1] {
            let mut grid = vec![0.0];
            grid.extend(times);
            let c = veps_cumulative(&k, eps, &grid).unwrap();
            for (i, &t) in times.iter().enumerate() {
                let want = common::regularized_variance(h, eps, t);
                worst = worst.max((2.0 * c.v[i + 1] - want).abs() / want.max(1.0));
            }
        }
    }
    let (eps, n) = (0.05f64, 20000u64);
    let dt = eps / 4.0;
    let mc_times = [0.25, 0.5, 1.0];
    let mut max_z: f64 = 0.0;
    for h in [0.5, 0.75] {
        let k = KernelSpec::fbm(h).unwrap();
        let sampler = PathSampler::new(&k, dt, ((1.0 + eps) / dt).ceil() as usize).unwrap();
        let acc = rdiss::ensemble::run_chunked(
            0..n,
            || vec![ScalarMoments::default(); 3],
            |acc, r| {
                let d = regularize(&sampler.sample_replica(99, r, 1), eps, &mc_times)?;
                for (a, g) in acc.iter_mut().zip(&d.g_values[0]) {
                    a.push(*g);
                }
                Ok(())
            },
        )
        .unwrap();
        for (a, &t) in acc.iter().zip(&mc_times) {
            let want = 2.0 * veps_cumulative(&k, eps, &[0.0, t]).unwrap().v[1];
            max_z = max_z.max((a.variance() - want).abs() / a.variance_se());
        }
    }
    outcome(
        worst <= 1e-8 && max_z <= 3.0,
        format!("analytic worst {worst:.1e} over 60 cases; MC max |z| {max_z:.2} (20000 replicas)"),
    )
}

fn mean_problem() -> SpectralProblem {
    SpectralProblem::new(
        0.1,
        vec![[1.0, 0.0], [0.5, 0.5]],
        InitialDatum::gaussian(1.0),
        Lattice::new(2.0, 0.25).unwrap(),
    )
    .unwrap()
}

fn mean_field() -> Outcome {
    let p = mean_problem();
    let modes: Vec<Vec2> = vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let mut max_z: f64 = 0.0;
    for h in [0.5, 0.75] {
        let k = KernelSpec::fbm(h).unwrap();
        let obs = Observables {
            times: vec![0.25, 1.0],
            modes: modes.clone(),
            pairs: vec![],
            dt: None,
        };
        let st = run_ensemble(&p, &k, 0.01, 20000, 7, obs).unwrap();
        for (ti, &t) in [0.25, 1.0].iter().enumerate() {
            for (mi, &m) in modes.iter().enumerate() {
                let want = mean_closed(&p, &k, t, m).unwrap();
                // each component against its own standard error
                let se = st.se[ti][mi] / 2f64.sqrt();
                let d = st.mean[ti][mi] - want;
                max_z = max_z.max(d.re.abs() / se).max(d.im.abs() / se);
            }
        }
    }
    outcome(max_z <= 3.0, format!("24 comparisons, max |z| {max_z:.2}"))
}

fn covariance() -> Outcome {
    let p = mean_problem();
    let k = KernelSpec::fbm(0.75).unwrap();
    let pairs: Vec<(Vec2, Vec2)> = vec![
        ([1.0, 0.0], [0.0, 1.0]),
        ([1.0, 0.0], [1.0, 0.0]),
        ([1.0, 1.0], [0.5, -0.5]),
        ([0.5, 0.0], [0.0, -0.5]),
        ([1.5, 0.5], [1.0, 1.0]),
    ];
    let grid = uniform_grid(1.0, 1000);
    let mut worst: f64 = 0.0;
    for &(a, b) in &pairs {
        let ode = cov_ode(&p, &k, &grid, a, b).unwrap();
        for (&t, c) in grid.iter().zip(&ode) {
            worst = worst.max((c - cov_closed(&p, &k, t, a, b).unwrap()).norm());
        }
    }
    let obs = Observables {
        times: vec![0.5],
        modes: vec![],
        pairs: pairs.clone(),
        dt: None,
    };
    let st = run_ensemble(&p, &k, 0.01, 20000, 11, obs).unwrap();
    let mut max_z: f64 = 0.0;
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let want = cov_closed(&p, &k, 0.5, a, b).unwrap();
        max_z = max_z.max((st.covariance[0][i] - want).norm() / st.covariance_se[0][i]);
    }
    outcome(
        worst <= 1e-8 && max_z <= 3.0,
        format!("ODE vs closed {worst:.1e} at dt=1e-3; MC covariance max z {max_z:.2} over 5 pairs"),
    )
}

fn exponents() -> Outcome {
    let s = 0.1;
    let p = SpectralProblem::new(0.0, vec![[s, 0.0], [0.0, s]], InitialDatum::gaussian(1.0), Lattice::new(4.0, 0.125).unwrap())
        .unwrap();
    let ts = log_times(1e-3, 1e-1, 9);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for h in [0.5, 0.75, 0.9] {
        let e = smalltime_exponents(&p, &KernelSpec::fbm(h).unwrap(), &ts).unwrap();
        worst = worst.max((e.slope_mean - 2.0 * h).abs()).max((e.slope_sd - h).abs());
        parts.push(format!("H={h}: ({:.3}, {:.3})", e.slope_mean, e.slope_sd));
    }
    outcome(worst <= 0.05, format!("{}; worst error {worst:.1e}", parts.join(", ")))
}

fn variance_field() -> Outcome {
    let k = KernelSpec::fbm(0.75).unwrap();
    let pde = SpectralProblem::new(0.0, vec![[0.8, 0.0], [0.0, 0.5]], InitialDatum::gaussian(1.0), Lattice::new(4.0, 0.125).unwrap())
        .unwrap();
    let residual = variance_pde_residual(&pde, &k, 0.3, &Lattice::new(2.0, 0.25).unwrap()).unwrap();

    let p = SpectralProblem::new(0.0, vec![[0.6, 0.2]], InitialDatum::gaussian(1.0), Lattice::new(4.0, 0.125).unwrap()).unwrap();
    let (t, eps, n) = (0.25, 0.01, 4000);
    let limit = variance_dual(&p, &k, t).unwrap();
    let v_eps = veps_cumulative(&k, eps, &[0.0, t]).unwrap().v[1];
    let at_eps = variance_dual(&p, &KernelSpec::tabulated(vec![0.0, t], vec![0.0, 2.0 * v_eps]).unwrap(), t).unwrap();
    let mc = mc_variance_field(&p, &k, eps, n, 21, t).unwrap();
    let peak = limit.values.iter().copied().fold(0.0, f64::max);
    let c = p.lattice.n / 2;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut max_z: f64 = 0.0;
    for i in [c - 4, c, c + 4] {
        for j in [c - 4, c, c + 4] {
            let budget = (limit.values[[i, j]] - at_eps.values[[i, j]]).abs() + 1e-6 * peak;
            let diff = (mc.values[[i, j]] - limit.values[[i, j]]).abs();
            worst_excess = worst_excess.max(diff - 3.0 * mc.se[[i, j]] - budget);
            max_z = max_z.max(diff / mc.se[[i, j]]);
        }
    }
    outcome(
        residual <= 1e-6 && worst_excess <= 0.0,
        format!("PDE residual {residual:.1e}; MC variance at 9 points, max |z| {max_z:.2}, margin {:.1e}", -worst_excess),
    )
}

fn two_scale() -> Outcome {
    let datum = TorusField::trig(
        0.1,
        vec![
            TrigTerm { m: [1, 0], cos: 1.0, sin: 0.0 },
            TrigTerm { m: [1, 2], cos: 0.0, sin: 0.5 },
            TrigTerm { m: [0, 3], cos: 0.3, sin: 0.0 },
        ],
    );
    let phi = TorusField::trig(
        0.0,
        vec![TrigTerm { m: [1, 0], cos: 1.0, sin: 0.0 }, TrigTerm { m: [2, 1], cos: 0.0, sin: 1.0 }],
    );
    let mut checks = Vec::new();
    for scale in [4u32, 8, 16] {
        let tp = TorusProblem {
            // the N = 16 shell reaches |m| = 32 and needs the finer grid
            n: if scale > 8 { 128 } else { 64 },
            kappa: 0.01,
            kappa_t: 0.02,
            family: SmallScaleFamily::shell(scale, 0.02).unwrap(),
            sigmas: vec![[0.5, 0.0], [0.0, 0.5]],
            kernel: KernelSpec::fbm(0.75).unwrap(),
            epsilon: 0.02,
            dt: 5e-4,
            t_final: 0.05,
            datum: datum.clone(),
        };
        checks.push(theorem_bound_check(&tp, 200, 1, &phi).unwrap());
    }
    let bounds = checks.iter().all(|c| c.pass);
    let ratios: Vec<f64> = checks.windows(2).map(|w| w[0].lhs / w[1].lhs).collect();
    let decreasing = ratios.iter().all(|r| *r >= 1.5);
    let rows: Vec<String> = checks
        .iter()
        .map(|c| format!("N={} lhs {:.2e} <= {:.2e}", c.scale, c.lhs, c.rhs + 3.0 * c.se + c.budget))
        .collect();
    outcome(
        bounds && decreasing,
        format!("{}; ratios {:.1} {:.1}", rows.join(", "), ratios[0], ratios[1]),
    )
}

const CONFIGS: [&str; 6] = [
    "experiment = \"veps\"\nepsilons = [0.1, 0.05]\n[kernel]\ntype = \"fbm\"\nhurst = 0.75\n[times]\nsteps = 100\n",
    "experiment = \"mean\"\nepsilons = [0.05]\n[kernel]\ntype = \"bm\"\n[problem]\nxi_max = 2.0\ndxi = 0.25\n[times]\nsteps = 50\n",
    "experiment = \"covariance\"\n[kernel]\ntype = \"damped_fbm\"\nhurst = 0.7\nlambda = 2.0\n[problem]\nxi_max = 2.0\ndxi = 0.25\n[times]\nsteps = 100\n",
    "experiment = \"asymptotics\"\n[kernel]\ntype = \"fbm\"\nhurst = 0.9\n[problem]\nkappa = 0.0\nsigmas = [[0.1, 0.0]]\nxi_max = 4.0\ndxi = 0.125\n",
    "experiment = \"ensemble\"\nreplicas = 300\nseed = 3\nepsilons = [0.02]\n[kernel]\ntype = \"fbm\"\nhurst = 0.6\n[problem]\nxi_max = 2.0\ndxi = 0.25\n",
    "experiment = \"twoscale\"\nreplicas = 8\nepsilons = [0.02]\n[kernel]\ntype = \"bm\"\n[problem]\nkappa = 0.01\n[twoscale]\nscales = [2, 4]\ndt = 2e-3\nt_final = 0.01\n",
];

fn determinism() -> Outcome {
    let root = std::env::temp_dir().join(format!("rdiss-acceptance-{}", std::process::id()));
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (i, text) in CONFIGS.iter().enumerate() {
        let cfg = parse_config(toml::from_str(text).unwrap()).unwrap();
        let first = root.join(format!("{i}/first"));
        let again = root.join(format!("{i}/again"));
        let opts = |out: &std::path::Path| RunOptions {
            out: out.to_path_buf(),
            emit_paths: true,
        };
        run(cfg, &opts(&first)).unwrap();
        let replay = load_config(&first.join("manifest.json")).unwrap();
        run(replay, &opts(&again)).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(&first).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for name in names {
            compared += 1;
            if std::fs::read(first.join(&name)).unwrap() != std::fs::read(again.join(&name)).unwrap() {
                mismatches.push(format!("{i}/{}", name.to_string_lossy()));
            }
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    outcome(
        mismatches.is_empty(),
        format!("6 experiments, {compared} files re-run from manifests{}", if mismatches.is_empty() { String::new() } else { format!("; differ: {}", mismatches.join(" ")) }),
    )
}

fn damped_plateau() -> Outcome {
    let mut worst: f64 = 0.0;
    for (h, lambda, alpha) in [(0.75, 1.0, 1.0), (0.6, 0.5, 2.0), (0.9, 3.0, 0.7), (0.55, 2.0, 1.0)] {
        let k = KernelSpec::damped_fbm(h, lambda, alpha).unwrap();
        let s = 2.0 * h - 1.0;
        let plateau = 2.0 * alpha * common::lower_gamma(s, 100.0) * lambda.powf(-s);
        worst = worst.max((k.dgamma(20.0 / lambda).unwrap() / plateau - 1.0).abs());
    }
    outcome(worst <= 1e-4, format!("worst relative error {worst:.1e} over 4 kernels"))
}

fn main() {
    let criteria: [(&str, Criterion, Duration); 10] = [
        ("kernel and quadrature oracles", kernel_oracles, Duration::from_secs(10)),
        ("V_eps convergence to gamma/2", veps_convergence, Duration::from_secs(60)),
        ("drive variance identity", variance_identity, Duration::from_secs(120)),
        ("mean-field reproduction", mean_field, Duration::from_secs(180)),
        ("covariance reproduction", covariance, Duration::from_secs(180)),
        ("reduced-dissipation exponents", exponents, Duration::from_secs(60)),
        ("physical-space variance", variance_field, Duration::from_secs(300)),
        ("two-scale bound", two_scale, Duration::from_secs(900)),
        ("determinism from manifests", determinism, Duration::MAX),
        ("damped long-time plateau", damped_plateau, Duration::from_secs(1)),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let in_time = took <= *budget;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let late = if in_time { String::new() } else { format!(" (over the {budget:?} budget)") };
        println!(
            "criterion {:>2}: {} {name}: {} [{:.1}s]{late}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} of 10 criteria pass", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
