//! Exact Gaussian path sampling and ε-regularized drives.
//!
//! Increments of a stationary-increment process on a uniform grid have a
//! symmetric Toeplitz covariance. [`PathSampler`] factors it once with the
//! generalized Schur algorithm (O(n²)) and then produces any number of
//! independent paths from seeded sub-streams.

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::io::Write;

/// Deterministic sub-stream seed for `path` below `seed`.
///
/// Distinct paths give statistically unrelated seeds (SplitMix64 finalizer
/// applied after each component).
pub fn stream_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = mix(seed ^ 0x6a09_e667_f3bc_c909);
    for &p in path {
        h = mix(h ^ mix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random number generator for a sub-stream.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, path))
}

/// Upper Cholesky factor `R` (with `T = RᵀR`) of a symmetric positive
/// definite Toeplitz matrix, stored packed by rows.
#[derive(Debug, Clone)]
pub struct ToeplitzCholesky {
    n: usize,
    packed: Vec<f64>,
}

impl ToeplitzCholesky {
    /// Factor the Toeplitz matrix with first column `c`.
    pub fn new(c: &[f64]) -> Result<Self> {
        let n = c.len();
        if n == 0 {
            return Err(Error::InvalidParameter("empty Toeplitz column".into()));
        }
        if !(c[0] > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "leading diagonal entry {} is not positive",
                c[0]
            )));
        }
        let scale = c[0].sqrt();
        let mut g: Vec<f64> = c.iter().map(|v| v / scale).collect();
        let mut h = g.clone();
        h[0] = 0.0;
        let mut packed = Vec::with_capacity(n * (n + 1) / 2);
        for k in 0..n {
            packed.extend_from_slice(&g[k..]);
            if k + 1 == n {
                break;
            }
            g.copy_within(k..n - 1, k + 1);
            let rho = h[k + 1] / g[k + 1];
            if !(rho.abs() < 1.0) {
                return Err(Error::NotPositiveDefinite(format!(
                    "reflection coefficient {rho} at order {}",
                    k + 1
                )));
            }
            let s = ((1.0 - rho) * (1.0 + rho)).sqrt();
            for j in k + 1..n {
                let (gj, hj) = (g[j], h[j]);
                g[j] = (gj - rho * hj) / s;
                h[j] = (hj - rho * gj) / s;
            }
        }
        Ok(Self { n, packed })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Row `k` of `R`, entries `k..n`.
    pub fn row(&self, k: usize) -> &[f64] {
        let start = k * self.n - k * k.saturating_sub(1) / 2;
        &self.packed[start..start + self.n - k]
    }

    /// `out = Rᵀ z`, a draw with covariance `T` when `z` is standard normal.
    pub fn apply_transpose(&self, z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut start = 0;
        for (k, &zk) in z.iter().enumerate().take(self.n) {
            let len = self.n - k;
            let row = &self.packed[start..start + len];
            for (o, r) in out[k..].iter_mut().zip(row) {
                *o += zk * r;
            }
            start += len;
        }
    }
}

/// Reusable exact sampler for one kernel on one grid.
#[derive(Debug, Clone)]
pub struct PathSampler {
    kernel: KernelSpec,
    dt: f64,
    factor: ToeplitzCholesky,
}

impl PathSampler {
    pub fn new(kernel: &KernelSpec, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be positive".into()));
        }
        // autocovariance of unit-lag increments
        let gam: Vec<f64> = (0..=n_steps)
            .map(|j| kernel.gamma(j as f64 * dt))
            .collect::<Result<_>>()?;
        let mut c: Vec<f64> = (0..n_steps)
            .map(|j| {
                let lo = gam[if j == 0 { 1 } else { j - 1 }];
                0.5 * (gam[j + 1] + lo - 2.0 * gam[j])
            })
            .collect();
        let factor = match ToeplitzCholesky::new(&c) {
            Ok(f) => f,
            Err(_) => {
                c[0] += 1e-12 * c[0];
                ToeplitzCholesky::new(&c).map_err(|e| {
                    Error::NotPositiveDefinite(format!(
                        "increment covariance of {} with dt = {dt}, {n_steps} steps, after jitter: {e}",
                        kernel.label()
                    ))
                })?
            }
        };
        Ok(Self {
            kernel: kernel.clone(),
            dt,
            factor,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.factor.dim()
    }

    /// Fill `out` (length `n_steps + 1`) with one path drawn from `rng`.
    pub fn fill<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.n_steps();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut inc = vec![0.0; n];
        self.factor.apply_transpose(&z, &mut inc);
        out[0] = 0.0;
        let mut acc = 0.0;
        for (o, d) in out[1..].iter_mut().zip(&inc) {
            acc += d;
            *o = acc;
        }
    }

    fn draw(&self, streams: impl Iterator<Item = u64>, seed: u64, replica: Option<u64>) -> DrivePath {
        let values = streams
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut v = vec![0.0; self.n_steps() + 1];
                self.fill(&mut rng, &mut v);
                v
            })
            .collect();
        DrivePath {
            dt: self.dt,
            seed,
            replica,
            values,
        }
    }

    /// Components use sub-streams `(seed, k)`.
    pub fn sample(&self, seed: u64, n_components: usize) -> DrivePath {
        self.draw(
            (0..n_components as u64).map(|k| stream_seed(seed, &[k])),
            seed,
            None,
        )
    }

    /// Replica `r` uses sub-streams `(seed, k, r)` for its components.
    pub fn sample_replica(&self, seed: u64, replica: u64, n_components: usize) -> DrivePath {
        self.draw(
            (0..n_components as u64).map(|k| stream_seed(seed, &[k, replica])),
            seed,
            Some(replica),
        )
    }
}

/// Draw `n_components` independent paths of `kernel` on `0, dt, …, n_steps·dt`.
pub fn sample_paths(
    kernel: &KernelSpec,
    dt: f64,
    n_steps: usize,
    n_components: usize,
    seed: u64,
) -> Result<DrivePath> {
    Ok(PathSampler::new(kernel, dt, n_steps)?.sample(seed, n_components))
}

/// Sampled multi-component path on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrivePath {
    pub dt: f64,
    pub seed: u64,
    pub replica: Option<u64>,
    /// `values[k][i] = G^k(i·dt)`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PathRecord<'a> {
    seed: u64,
    replica: Option<u64>,
    k: usize,
    dt: f64,
    values: &'a [f64],
}

impl DrivePath {
    /// Wrap given values; every component must start at zero.
    pub fn from_values(dt: f64, values: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        let n = values.first().map_or(0, Vec::len);
        if n < 2 || values.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidParameter(
                "components must be nonempty and of equal length".into(),
            ));
        }
        if values.iter().any(|v| v[0] != 0.0) {
            return Err(Error::InvalidParameter("paths must vanish at t = 0".into()));
        }
        Ok(Self {
            dt,
            seed: 0,
            replica: None,
            values,
        })
    }

    pub fn n_components(&self) -> usize {
        self.values.len()
    }

    pub fn n_steps(&self) -> usize {
        self.values[0].len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps() as f64
    }

    /// Linear interpolation of component `k` at `s ∈ [0, horizon]`.
    pub fn interpolate(&self, k: usize, s: f64) -> f64 {
        let v = &self.values[k];
        let x = s / self.dt;
        let i = (x.floor() as usize).min(v.len() - 2);
        let w = x - i as f64;
        v[i] + w * (v[i + 1] - v[i])
    }

    /// One NDJSON record per component.
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, values) in self.values.iter().enumerate() {
            let rec = PathRecord {
                seed: self.seed,
                replica: self.replica,
                k,
                dt: self.dt,
                values,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `𝒢^{k,ε}` sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularizedDrive {
    pub epsilon: f64,
    pub t_grid: Vec<f64>,
    /// `g_values[k][i] = 𝒢^{k,ε}(t_grid[i])`.
    pub g_values: Vec<Vec<f64>>,
}

impl RegularizedDrive {
    /// A drive that is identically zero.
    pub fn zero(n_components: usize, t_grid: &[f64]) -> Self {
        Self {
            epsilon: f64::NAN,
            t_grid: t_grid.to_vec(),
            g_values: vec![vec![0.0; t_grid.len()]; n_components],
        }
    }

    pub fn n_components(&self) -> usize {
        self.g_values.len()
    }
}

/// Regularize `p` with window `epsilon` and sample the result on `t_grid`.
///
/// The defining time integral is a trapezoid sum at path resolution, with
/// the path linearly interpolated at `s ± ε`.
pub fn regularize(p: &DrivePath, epsilon: f64, t_grid: &[f64]) -> Result<RegularizedDrive> {
    if !(epsilon >= p.dt * (1.0 - 1e-12)) {
        return Err(Error::InvalidParameter(format!(
            "epsilon = {epsilon} must be at least the path step {}",
            p.dt
        )));
    }
    if t_grid.iter().any(|&t| t.is_nan() || t < 0.0) {
        return Err(Error::Domain("time grid must be nonnegative".into()));
    }
    let t_max = t_grid.iter().copied().fold(0.0, f64::max);
    let horizon = p.horizon();
    let slack = 1e-9 * p.dt;
    if t_max + epsilon > horizon + slack {
        return Err(Error::Range(format!(
            "regularization needs the path up to {}, but it ends at {horizon}; extend by {} ({} more steps)",
            t_max + epsilon,
            t_max + epsilon - horizon,
            ((t_max + epsilon - horizon) / p.dt).ceil()
        )));
    }
    let two_eps = 2.0 * epsilon;
    let n_nodes = ((t_max / p.dt).floor() as usize + 1).min(p.n_steps() + 1);

    let g_values = (0..p.n_components())
        .map(|k| {
            let f = |s: f64| {
                let hi = (s + epsilon).min(horizon);
                (p.interpolate(k, hi) - p.interpolate(k, (s - epsilon).max(0.0))) / two_eps
            };
            let fs: Vec<f64> = (0..=n_nodes).map(|i| f(i as f64 * p.dt)).collect();
            let mut cum = vec![0.0; n_nodes + 1];
            for i in 1..=n_nodes {
                cum[i] = cum[i - 1] + 0.5 * p.dt * (fs[i - 1] + fs[i]);
            }
            t_grid
                .iter()
                .map(|&t| {
                    let x = t / p.dt;
                    let mut i = x.floor() as usize;
                    if (x - x.round()).abs() < 1e-9 {
                        i = x.round() as usize;
                    }
                    let i = i.min(n_nodes);
                    let s = i as f64 * p.dt;
                    let rest = t - s;
                    if rest.abs() <= slack {
                        cum[i]
                    } else {
                        cum[i] + 0.5 * rest * (fs[i] + f(t))
                    }
                })
                .collect()
        })
        .collect();
    Ok(RegularizedDrive {
        epsilon,
        t_grid: t_grid.to_vec(),
        g_values,
    })
}
