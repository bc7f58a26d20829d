//! Replica-parallel Monte Carlo estimates of mode means, mode covariances and
//! the physical-space variance at finite ε.
//!
//! Replicas are grouped in fixed chunks of [`CHUNK`]; each chunk is
//! accumulated sequentially and chunk results are merged in index order, so
//! the output depends only on `(seed, configuration)` and not on the number of
//! worker threads.

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::moments::{cov_closed, mean_closed};
use crate::sampler::{regularize, DrivePath, PathSampler};
use crate::spectral::{csv_err, dot, norm2, Lattice, Reconstructor, SpectralProblem, Vec2};
use crate::stats::{Comoments, Merge, ScalarMoments};
use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::ops::Range;

pub const CHUNK: u64 = 64;

/// Accumulate `visit(acc, r)` over replicas `r ∈ range`, chunk-parallel with
/// an ordered merge.
pub fn run_chunked<A, M, V>(range: Range<u64>, make: M, visit: V) -> Result<A>
where
    A: Merge + Send,
    M: Fn() -> A + Sync,
    V: Fn(&mut A, u64) -> Result<()> + Sync,
{
    let first = range.start / CHUNK;
    let last = range.end.div_ceil(CHUNK);
    let batch = 4 * rayon::current_num_threads().max(1) as u64;
    let mut total = make();
    let mut c0 = first;
    while c0 < last {
        let c1 = (c0 + batch).min(last);
        let parts = (c0..c1)
            .into_par_iter()
            .map(|c| {
                let mut acc = make();
                let lo = (c * CHUNK).max(range.start);
                let hi = ((c + 1) * CHUNK).min(range.end);
                for r in lo..hi {
                    visit(&mut acc, r)?;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<A>>>()?;
        for part in &parts {
            total.merge(part);
        }
        c0 = c1;
    }
    Ok(total)
}

/// What to record from every replica.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observables {
    pub times: Vec<f64>,
    /// Angular wavevectors whose means are estimated.
    pub modes: Vec<Vec2>,
    /// `(k, q)` pairs whose covariances are estimated.
    pub pairs: Vec<(Vec2, Vec2)>,
    /// Path step; defaults to `ε/4`.
    pub dt: Option<f64>,
}

/// Per-(time, observable) partial sums.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleAccumulator {
    pub n: u64,
    /// `[t][mode]` over `(Re, Im)`.
    pub modes: Vec<Vec<Comoments>>,
    /// `[t][pair]` over `(Re x ȳ, Im x ȳ, Re x, Im x, Re y, Im y)`.
    pub pairs: Vec<Vec<Comoments>>,
}

impl EnsembleAccumulator {
    fn new(obs: &Observables) -> Self {
        let nt = obs.times.len();
        Self {
            n: 0,
            modes: vec![vec![Comoments::new(2); obs.modes.len()]; nt],
            pairs: vec![vec![Comoments::new(6); obs.pairs.len()]; nt],
        }
    }
}

impl Merge for EnsembleAccumulator {
    fn merge(&mut self, o: &Self) {
        self.n += o.n;
        self.modes.merge(&o.modes);
        self.pairs.merge(&o.pairs);
    }
}

/// Finished estimates, indexed `[t][mode]` and `[t][pair]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub n_replicas: u64,
    pub epsilon: f64,
    pub seed: u64,
    pub observables: Observables,
    pub mean: Vec<Vec<Complex64>>,
    /// `E|θ̂ - E θ̂|²`, unbiased.
    pub variance: Vec<Vec<f64>>,
    /// `√(variance / n)`.
    pub se: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<Complex64>>,
    /// Delta-method standard error of the covariance estimate.
    pub covariance_se: Vec<Vec<f64>>,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub kind: &'static str,
    pub t: f64,
    pub k: Vec2,
    pub q: Option<Vec2>,
    pub re: f64,
    pub im: f64,
    pub var: f64,
    pub se: f64,
    pub re_closed: f64,
    pub im_closed: f64,
    /// `|estimate - limit| / se`.
    pub z_score: f64,
}

impl EnsembleStats {
    fn finish(acc: &EnsembleAccumulator, epsilon: f64, seed: u64, obs: &Observables) -> Self {
        let n = acc.n;
        let nf = n as f64;
        let mean = acc
            .modes
            .iter()
            .map(|row| row.iter().map(|c| Complex64::new(c.mean[0], c.mean[1])).collect())
            .collect();
        let variance: Vec<Vec<f64>> = acc
            .modes
            .iter()
            .map(|row| row.iter().map(|c| c.cov(0, 0) + c.cov(1, 1)).collect())
            .collect();
        let se = variance
            .iter()
            .map(|row| row.iter().map(|v| (v / nf).sqrt()).collect())
            .collect();
        let covariance = acc
            .pairs
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| Complex64::new(c.cov(2, 4) + c.cov(3, 5), c.cov(3, 4) - c.cov(2, 5)))
                    .collect()
            })
            .collect();
        let covariance_se = acc
            .pairs
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| {
                        // Z = x ȳ - μ̄_y x - μ_x ȳ linearizes the estimator
                        let (a, b) = (c.mean[4], c.mean[5]);
                        let (cr, di) = (c.mean[2], c.mean[3]);
                        let w_re = [1.0, 0.0, -a, -b, -cr, -di];
                        let w_im = [0.0, 1.0, b, -a, -di, cr];
                        ((c.linear_variance(&w_re) + c.linear_variance(&w_im)) / nf).sqrt()
                    })
                    .collect()
            })
            .collect();
        Self {
            n_replicas: n,
            epsilon,
            seed,
            observables: obs.clone(),
            mean,
            variance,
            se,
            covariance,
            covariance_se,
        }
    }

    /// Mode and pair rows with the ε → 0 closed forms alongside.
    pub fn summary(&self, p: &SpectralProblem, kern: &KernelSpec) -> Result<Vec<SummaryRow>> {
        let obs = &self.observables;
        let mut rows = Vec::new();
        for (ti, &t) in obs.times.iter().enumerate() {
            for (mi, &k) in obs.modes.iter().enumerate() {
                let closed = mean_closed(p, kern, t, k)?;
                let est = self.mean[ti][mi];
                rows.push(SummaryRow {
                    kind: "mean",
                    t,
                    k,
                    q: None,
                    re: est.re,
                    im: est.im,
                    var: self.variance[ti][mi],
                    se: self.se[ti][mi],
                    re_closed: closed.re,
                    im_closed: closed.im,
                    z_score: z(est, closed, self.se[ti][mi]),
                });
            }
            for (pi, &(k, q)) in obs.pairs.iter().enumerate() {
                let closed = cov_closed(p, kern, t, k, q)?;
                let est = self.covariance[ti][pi];
                let se = self.covariance_se[ti][pi];
                rows.push(SummaryRow {
                    kind: "covariance",
                    t,
                    k,
                    q: Some(q),
                    re: est.re,
                    im: est.im,
                    var: se * se * self.n_replicas as f64,
                    se,
                    re_closed: closed.re,
                    im_closed: closed.im,
                    z_score: z(est, closed, se),
                });
            }
        }
        Ok(rows)
    }

    /// Mean rows as CSV: `t,k1,k2,re_mean,im_mean,var,se,re_closed,im_closed,z_score`.
    pub fn write_csv<W: Write>(&self, p: &SpectralProblem, kern: &KernelSpec, w: W) -> Result<()> {
        let rows = self.summary(p, kern)?;
        crate::io::write_csv(
            w,
            &["t", "k1", "k2", "re_mean", "im_mean", "var", "se", "re_closed", "im_closed", "z_score"],
            rows.iter().filter(|r| r.kind == "mean").map(|r| {
                [r.t, r.k[0], r.k[1], r.re, r.im, r.var, r.se, r.re_closed, r.im_closed, r.z_score]
            }),
        )
        .map_err(csv_err)
    }

    /// Every summary row as one JSON object per line.
    pub fn write_ndjson<W: Write>(&self, p: &SpectralProblem, kern: &KernelSpec, mut w: W) -> Result<()> {
        for row in self.summary(p, kern)? {
            let line = serde_json::to_string(&row).expect("rows serialize");
            writeln!(w, "{line}").map_err(|e| Error::InvalidParameter(format!("write failed: {e}")))?;
        }
        Ok(())
    }
}

fn z(est: Complex64, closed: Complex64, se: f64) -> f64 {
    let d = (est - closed).norm();
    if se > 0.0 {
        d / se
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// A configured ensemble: problem, kernel, regularization and a path sampler
/// long enough for the largest requested time.
#[derive(Debug)]
pub struct Ensemble<'a> {
    problem: &'a SpectralProblem,
    epsilon: f64,
    observables: Observables,
    sampler: Option<PathSampler>,
}

fn path_sampler(kern: &KernelSpec, epsilon: f64, t_max: f64, dt: Option<f64>, n_comp: usize) -> Result<Option<PathSampler>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if n_comp == 0 {
        return Ok(None);
    }
    let dt = dt.unwrap_or(epsilon / 4.0);
    let n_steps = ((t_max + epsilon) / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    PathSampler::new(kern, dt, n_steps).map(Some)
}

impl<'a> Ensemble<'a> {
    pub fn new(
        problem: &'a SpectralProblem,
        kernel: &'a KernelSpec,
        epsilon: f64,
        observables: Observables,
    ) -> Result<Self> {
        problem.validate()?;
        if observables.times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Domain("observation times must be finite and nonnegative".into()));
        }
        let t_max = observables.times.iter().copied().fold(0.0, f64::max);
        let sampler = path_sampler(kernel, epsilon, t_max, observables.dt, problem.sigmas.len())?;
        Ok(Self {
            problem,
            epsilon,
            observables,
            sampler,
        })
    }

    /// Driving path of replica `r`.
    pub fn path(&self, seed: u64, r: u64) -> Option<DrivePath> {
        self.sampler
            .as_ref()
            .map(|s| s.sample_replica(seed, r, self.problem.sigmas.len()))
    }

    fn shifts(&self, seed: u64, r: u64, times: &[f64]) -> Result<Vec<Vec2>> {
        let Some(path) = self.path(seed, r) else {
            return Ok(vec![[0.0, 0.0]; times.len()]);
        };
        let drive = regularize(&path, self.epsilon, times)?;
        Ok((0..times.len()).map(|i| self.problem.shift(&drive, i)).collect())
    }

    /// Partial sums over replicas in `range`.
    pub fn accumulate(&self, seed: u64, range: Range<u64>) -> Result<EnsembleAccumulator> {
        let obs = &self.observables;
        let p = self.problem;
        let base: Vec<Vec<Complex64>> = obs
            .times
            .iter()
            .map(|&t| {
                obs.modes
                    .iter()
                    .map(|&k| p.theta0_hat(k) * (-p.kappa * norm2(k) * t).exp())
                    .collect()
            })
            .collect();
        let mode = |t: f64, k: Vec2, s: Vec2| {
            p.theta0_hat(k) * Complex64::from_polar((-p.kappa * norm2(k) * t).exp(), dot(k, s))
        };
        run_chunked(
            range,
            || EnsembleAccumulator::new(obs),
            |acc, r| {
                let shifts = self.shifts(seed, r, &obs.times)?;
                acc.n += 1;
                for (ti, s) in shifts.iter().enumerate() {
                    for (mi, &k) in obs.modes.iter().enumerate() {
                        let v = base[ti][mi] * Complex64::from_polar(1.0, dot(k, *s));
                        acc.modes[ti][mi].push(&[v.re, v.im]);
                    }
                    let t = obs.times[ti];
                    for (pi, &(k, q)) in obs.pairs.iter().enumerate() {
                        let (x, y) = (mode(t, k, *s), mode(t, q, *s));
                        let pr = x * y.conj();
                        acc.pairs[ti][pi].push(&[pr.re, pr.im, x.re, x.im, y.re, y.im]);
                    }
                }
                Ok(())
            },
        )
    }

    pub fn finish(&self, acc: &EnsembleAccumulator, seed: u64) -> Result<EnsembleStats> {
        if acc.n < 2 {
            return Err(Error::InvalidParameter(
                "at least two replicas are needed for a variance".into(),
            ));
        }
        Ok(EnsembleStats::finish(acc, self.epsilon, seed, &self.observables))
    }

    pub fn run(&self, n_replicas: u64, seed: u64) -> Result<EnsembleStats> {
        if n_replicas < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 replicas, got {n_replicas}"
            )));
        }
        self.finish(&self.accumulate(seed, 0..n_replicas)?, seed)
    }
}

/// Estimate mode means and covariances from `n_replicas` replicas.
pub fn run_ensemble(
    p: &SpectralProblem,
    kern: &KernelSpec,
    epsilon: f64,
    n_replicas: u64,
    seed: u64,
    observables: Observables,
) -> Result<EnsembleStats> {
    Ensemble::new(p, kern, epsilon, observables)?.run(n_replicas, seed)
}

/// Empirical pointwise variance of `θ_ε(t, ·)` on the problem's grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceField {
    pub lattice: Lattice,
    pub n_replicas: u64,
    pub t: f64,
    pub values: Array2<f64>,
    pub se: Array2<f64>,
    pub mean: Array2<f64>,
}

impl VarianceField {
    /// Columns `x,y,variance,se,mean`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let lat = self.lattice;
        let rows = self.values.indexed_iter().map(|((i, j), v)| {
            let x = lat.point(i, j);
            [x[0], x[1], *v, self.se[[i, j]], self.mean[[i, j]]]
        });
        crate::io::write_csv(w, &["x", "y", "variance", "se", "mean"], rows).map_err(csv_err)
    }
}

/// Reconstruct every replica's field at time `t` and accumulate pointwise
/// moments. The problem's lattice sets the grid; keep it small.
pub fn mc_variance_field(
    p: &SpectralProblem,
    kern: &KernelSpec,
    epsilon: f64,
    n_replicas: u64,
    seed: u64,
    t: f64,
) -> Result<VarianceField> {
    if n_replicas < 4 {
        return Err(Error::InvalidParameter(format!(
            "need at least 4 replicas for a variance error bar, got {n_replicas}"
        )));
    }
    let obs = Observables {
        times: vec![t],
        modes: vec![],
        pairs: vec![],
        dt: None,
    };
    let ens = Ensemble::new(p, kern, epsilon, obs)?;
    let rec = Reconstructor::new(p.lattice);
    let n = p.lattice.n;
    let acc = run_chunked(
        0..n_replicas,
        || vec![ScalarMoments::default(); n * n],
        |acc, r| {
            let s = ens.shifts(seed, r, &[t])?[0];
            let field = rec.apply(&p.shifted_spectrum(t, s))?;
            for (a, v) in acc.iter_mut().zip(field.values.iter()) {
                a.push(*v);
            }
            Ok(())
        },
    )?;
    let grid = |f: &dyn Fn(&ScalarMoments) -> f64| {
        Array2::from_shape_vec((n, n), acc.iter().map(f).collect()).expect("n × n")
    };
    Ok(VarianceField {
        lattice: p.lattice,
        n_replicas,
        t,
        values: grid(&|m| m.variance()),
        se: grid(&|m| m.variance_se()),
        mean: grid(&|m| m.mean),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::InitialDatum;

    fn obs(times: Vec<f64>, modes: Vec<Vec2>) -> Observables {
        Observables {
            times,
            modes,
            pairs: vec![([1.0, 0.0], [0.5, 0.5])],
            dt: None,
        }
    }

    fn problem(kappa: f64, sigmas: Vec<Vec2>) -> SpectralProblem {
        SpectralProblem::new(kappa, sigmas, InitialDatum::gaussian(1.0), Lattice::new(4.0, 0.125).unwrap()).unwrap()
    }

    #[test]
    fn zero_drive_is_deterministic_heat_decay() {
        let p = problem(0.1, vec![]);
        let k = KernelSpec::bm();
        let st = run_ensemble(&p, &k, 0.05, 10, 1, obs(vec![0.0, 0.5], vec![[1.0, 0.0], [0.0, 2.0]])).unwrap();
        for (ti, t) in [0.0, 0.5].iter().enumerate() {
            for (mi, m) in [[1.0, 0.0], [0.0, 2.0]].iter().enumerate() {
                let want = p.theta0_hat(*m) * (-0.1 * norm2(*m) * t).exp();
                assert!((st.mean[ti][mi] - want).norm() < 1e-15);
                assert_eq!(st.variance[ti][mi], 0.0);
            }
            assert_eq!(st.covariance[ti][0].norm(), 0.0);
        }
    }

    #[test]
    fn independent_of_thread_count() {
        let p = problem(0.05, vec![[1.0, 0.0], [0.0, 0.7]]);
        let k = KernelSpec::fbm(0.75).unwrap();
        let o = obs(vec![0.25, 0.5], vec![[1.0, 1.0]]);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| run_ensemble(&p, &k, 0.05, 300, 9, o.clone()).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn merge_of_halves_matches_one_pass() {
        let p = problem(0.0, vec![[1.0, 0.2]]);
        let k = KernelSpec::bm();
        let ens = Ensemble::new(&p, &k, 0.05, obs(vec![0.5], vec![[1.0, 0.0]])).unwrap();
        let whole = ens.finish(&ens.accumulate(4, 0..200).unwrap(), 4).unwrap();
        let mut a = ens.accumulate(4, 0..77).unwrap();
        a.merge(&ens.accumulate(4, 77..200).unwrap());
        let split = ens.finish(&a, 4).unwrap();
        assert!((whole.mean[0][0] - split.mean[0][0]).norm() < 1e-12);
        assert!((whole.variance[0][0] - split.variance[0][0]).abs() < 1e-12);
        assert!((whole.covariance[0][0] - split.covariance[0][0]).norm() < 1e-12);
        assert!((whole.covariance_se[0][0] - split.covariance_se[0][0]).abs() < 1e-12);
    }

    #[test]
    fn rejects_too_few_replicas() {
        let p = problem(0.0, vec![[1.0, 0.0]]);
        assert!(run_ensemble(&p, &KernelSpec::bm(), 0.05, 1, 0, obs(vec![0.1], vec![])).is_err());
        assert!(mc_variance_field(&p, &KernelSpec::bm(), 0.05, 2, 0, 0.1).is_err());
    }

    #[test]
    fn variance_field_trivial_cases() {
        let lat = Lattice::new(2.0, 0.25).unwrap();
        let p = SpectralProblem::new(0.0, vec![[1.0, 0.0]], InitialDatum::gaussian(1.0), lat).unwrap();
        let k = KernelSpec::fbm(0.75).unwrap();
        let v0 = mc_variance_field(&p, &k, 0.05, 8, 3, 0.0).unwrap();
        assert!(v0.values.iter().all(|v| *v == 0.0));
        let still = SpectralProblem { sigmas: vec![[0.0, 0.0]], ..p.clone() };
        let vz = mc_variance_field(&still, &k, 0.05, 8, 3, 0.3).unwrap();
        assert!(vz.values.iter().all(|v| v.abs() < 1e-25));
    }

    #[test]
    fn summary_and_outputs() {
        let p = problem(0.0, vec![[1.0, 0.0]]);
        let k = KernelSpec::bm();
        let st = run_ensemble(&p, &k, 0.05, 400, 2, obs(vec![0.25], vec![[1.0, 0.0]])).unwrap();
        let rows = st.summary(&p, &k).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.z_score < 5.0), "{rows:?}");
        let mut csv = Vec::new();
        st.write_csv(&p, &k, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,k1,k2,re_mean,im_mean,var,se,re_closed,im_closed,z_score\n"));
        assert_eq!(text.lines().count(), 2);
        let mut nd = Vec::new();
        st.write_ndjson(&p, &k, &mut nd).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(nd).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[1]["kind"], "covariance");
    }
}
