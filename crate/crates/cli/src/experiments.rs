use crate::config::{Experiment, RunConfig};
use crate::{Check, CliError, Outputs, RunOptions};
use rdiss::ensemble::{Ensemble, Observables};
use rdiss::io::write_csv;
use rdiss::kernel::KernelSpec;
use rdiss::moments::{cov_closed, cov_ode, log_times, mean_closed, mean_ode, mean_pde_residual, smalltime_exponents};
use rdiss::twoscale::{theorem_bound_check, write_bound_table};
use rdiss::veps::{uniform_grid, veps_cumulative};
use std::io::Write;

/// File that a sweep concatenates for each experiment.
pub(crate) fn primary_table(e: Experiment) -> &'static str {
    match e {
        Experiment::Veps => "veps_deviation.csv",
        Experiment::Mean => "mean.csv",
        Experiment::Covariance => "covariance.csv",
        Experiment::Asymptotics => "exponents.csv",
        Experiment::Ensemble => "ensemble_mean.csv",
        Experiment::Twoscale => "bounds.csv",
    }
}

pub(crate) fn dispatch(cfg: &RunConfig, opts: &RunOptions, out: &mut Outputs) -> Result<Vec<Check>, CliError> {
    match cfg.experiment {
        Experiment::Veps => veps(cfg, out),
        Experiment::Mean => mean(cfg, out),
        Experiment::Covariance => covariance(cfg, out),
        Experiment::Asymptotics => asymptotics(cfg, out),
        Experiment::Ensemble => ensemble(cfg, opts, out),
        Experiment::Twoscale => twoscale(cfg, out),
    }
}

fn csv(name: &str, r: csv::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| CliError::Io {
        path: name.into(),
        source: std::io::Error::other(e.to_string()),
    })
}

fn veps(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, CliError> {
    let grid = uniform_grid(cfg.times.t_max, cfg.times.steps);
    let (lo, hi) = (0.1f64.min(cfg.times.t_max), cfg.times.t_max.min(1.0));
    let mut deviations = Vec::new();
    let mut plateau: f64 = 0.0;
    for (i, &eps) in cfg.epsilons.iter().enumerate() {
        let curve = veps_cumulative(&cfg.kernel, eps, &grid)?;
        out.write(&format!("veps_{i}.csv"), |w| Ok(curve.write_csv(w)?))?;
        deviations.push((eps, curve.sup_deviation(lo, hi)?));
        for (t, v) in curve.t_grid.iter().zip(&curve.vdot) {
            if *t >= 2.0 * eps {
                plateau = plateau.max((v - 0.5).abs());
            }
        }
    }
    out.write("veps_deviation.csv", |w| {
        csv("veps_deviation.csv", write_csv(w, &["epsilon", "sup_deviation"], deviations.iter().map(|d| [d.0, d.1])))
    })?;
    let mut sorted = deviations.clone();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let violations = sorted.windows(2).filter(|w| w[1].1 > w[0].1).count();
    let mut checks = vec![Check::at_most("sup_deviation_monotone_violations", violations as f64, 0.0)];
    if let Some(last) = sorted.last() {
        checks.push(Check::at_most("sup_deviation_smallest_epsilon", last.1, 0.01));
    }
    if cfg.kernel == KernelSpec::Bm {
        checks.push(Check::at_most("bm_plateau_error", plateau, 1e-10));
    }
    if let KernelSpec::DampedFbm { lambda, .. } = cfg.kernel {
        let limit = cfg.kernel.dgamma_limit().expect("damped kernels have a plateau");
        let rel = (cfg.kernel.dgamma(20.0 / lambda)? / limit - 1.0).abs();
        checks.push(Check::at_most("damped_plateau_relative_error", rel, 1e-4));
    }
    Ok(checks)
}

fn mean(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, CliError> {
    let p = cfg.problem.build()?;
    let grid = uniform_grid(cfg.times.t_max, cfg.times.steps);
    let eps = cfg.epsilons[0];
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for &k in &cfg.modes {
        let m = mean_ode(&p, &cfg.kernel, eps, &grid, k)?;
        worst = worst.max(m.max_discrepancy());
        for (i, &t) in m.times.iter().enumerate() {
            let lim = mean_closed(&p, &cfg.kernel, t, k)?;
            rows.push([t, k[0], k[1], m.rk4[i].re, m.rk4[i].im, m.exponential[i].re, m.exponential[i].im, lim.re, lim.im]);
        }
    }
    out.write("mean.csv", |w| {
        csv(
            "mean.csv",
            write_csv(w, &["t", "k1", "k2", "re_rk4", "im_rk4", "re_exponential", "im_exponential", "re_limit", "im_limit"], rows),
        )
    })?;
    let residual = mean_pde_residual(&p, &cfg.kernel, cfg.times.t_max)?;
    Ok(vec![
        Check::at_most("rk4_vs_exponential", worst, 1e-10),
        Check::at_most("limit_pde_residual", residual, 1e-8),
    ])
}

fn covariance(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, CliError> {
    let p = cfg.problem.build()?;
    let grid = uniform_grid(cfg.times.t_max, cfg.times.steps);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for &[k, q] in &cfg.pairs {
        let ode = cov_ode(&p, &cfg.kernel, &grid, k, q)?;
        for (&t, c) in grid.iter().zip(&ode) {
            let exact = cov_closed(&p, &cfg.kernel, t, k, q)?;
            worst = worst.max((c - exact).norm());
            rows.push([t, k[0], k[1], q[0], q[1], c.re, c.im, exact.re, exact.im]);
        }
    }
    out.write("covariance.csv", |w| {
        csv(
            "covariance.csv",
            write_csv(w, &["t", "k1", "k2", "q1", "q2", "re_ode", "im_ode", "re_closed", "im_closed"], rows),
        )
    })?;
    Ok(vec![Check::at_most("ode_vs_closed", worst, 1e-8)])
}

fn expected_hurst(k: &KernelSpec) -> Option<f64> {
    match k {
        KernelSpec::Bm => Some(0.5),
        KernelSpec::Fbm { hurst } => Some(*hurst),
        _ => None,
    }
}

fn asymptotics(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, CliError> {
    let p = cfg.problem.build()?;
    let ts = log_times(1e-3, 1e-1, 9);
    let e = smalltime_exponents(&p, &cfg.kernel, &ts)?;
    let h = expected_hurst(&cfg.kernel);
    out.write("exponents.csv", |w| {
        let expect = h.unwrap_or(f64::NAN);
        csv(
            "exponents.csv",
            write_csv(
                w,
                &["slope_mean", "slope_sd", "expected_mean", "expected_sd"],
                [[e.slope_mean, e.slope_sd, 2.0 * expect, expect]],
            ),
        )
    })?;
    out.write("smalltime.csv", |w| {
        csv(
            "smalltime.csv",
            write_csv(w, &["t", "mean_deviation_l2", "spread_l2"], e.samples.iter().map(|s| [s.0, s.1, s.2])),
        )
    })?;
    Ok(match h {
        Some(h) => vec![
            Check::at_most("slope_mean_error", (e.slope_mean - 2.0 * h).abs(), 0.05),
            Check::at_most("slope_sd_error", (e.slope_sd - h).abs(), 0.05),
        ],
        None => vec![],
    })
}

/// z-scores above this fail the run's summary.
const Z_LIMIT: f64 = 4.0;

fn ensemble(cfg: &RunConfig, opts: &RunOptions, out: &mut Outputs) -> Result<Vec<Check>, CliError> {
    let p = cfg.problem.build()?;
    let obs = Observables {
        times: cfg.times.points.clone(),
        modes: cfg.modes.clone(),
        pairs: cfg.pairs.iter().map(|[k, q]| (*k, *q)).collect(),
        dt: None,
    };
    let ens = Ensemble::new(&p, &cfg.kernel, cfg.epsilons[0], obs)?;
    let stats = ens.run(cfg.replicas, cfg.seed)?;
    out.write("ensemble_mean.csv", |w| Ok(stats.write_csv(&p, &cfg.kernel, w)?))?;
    out.write("ensemble.ndjson", |w| Ok(stats.write_ndjson(&p, &cfg.kernel, w)?))?;
    if opts.emit_paths {
        let name = "paths.ndjson";
        let io = out.io(name);
        let mut w = out.create(name)?;
        let write = (|| {
            for r in 0..cfg.replicas {
                if let Some(path) = ens.path(cfg.seed, r) {
                    path.write_ndjson(&mut w)?;
                }
            }
            w.flush()
        })();
        write.map_err(io)?;
    }
    let rows = stats.summary(&p, &cfg.kernel)?;
    let worst = |kind: &str| rows.iter().filter(|r| r.kind == kind).map(|r| r.z_score).fold(0.0, f64::max);
    Ok(vec![
        Check::at_most("mean_max_z", worst("mean"), Z_LIMIT),
        Check::at_most("covariance_max_z", worst("covariance"), Z_LIMIT),
    ])
}

fn twoscale(cfg: &RunConfig, out: &mut Outputs) -> Result<Vec<Check>, CliError> {
    let mut checks = Vec::new();
    let mut results = Vec::new();
    for &s in &cfg.twoscale.scales {
        let tp = cfg.torus_problem(s)?;
        let chk = theorem_bound_check(&tp, cfg.replicas, cfg.seed, &cfg.twoscale.phi)?;
        let name = format!("pairings_N{s}.ndjson");
        let io = out.io(&name);
        let mut w = out.create(&name)?;
        chk.write_ndjson(&mut w).and_then(|_| w.flush()).map_err(io)?;
        checks.push(Check::at_most(
            format!("bound_N{s}"),
            chk.lhs,
            chk.rhs + 3.0 * chk.se + chk.budget,
        ));
        results.push(chk);
    }
    for w in results.windows(2) {
        checks.push(Check::at_least(
            format!("decrease_N{}_N{}", w[0].scale, w[1].scale),
            w[0].lhs / w[1].lhs,
            1.5,
        ));
    }
    out.write("bounds.csv", |w| Ok(write_bound_table(&results, w)?))?;
    Ok(checks)
}
