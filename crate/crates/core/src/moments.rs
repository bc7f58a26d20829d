//! Limiting mean and covariance of the Fourier modes, in closed form and by
//! integrating their evolution equations, plus physical-space fields built
//! from them.
//!
//! With `E(t,k) = e^{-κ|k|²t}` and the limit `V_ε → ½γ`,
//!
//! * `e(t,k) = θ̂₀(k) E(t,k) e^{-½σ²(k)γ(t)}`
//! * `C(t,k,q) = θ̂₀(k) conj θ̂₀(q) E(t,k) E(t,q) (e^{-½σ²(k-q)γ} - e^{-½(σ²(k)+σ²(q))γ})`
//!
//! and `C` solves
//! `dC = -κ(|k|²+|q|²)C dt - ½σ²(k-q) C dγ + ρ(k,q) e(k) conj e(q) dγ`.

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::spectral::{dot, norm2, PhysicalField, Reconstructor, SpectralProblem, Vec2};
use crate::veps::{veps_cumulative, veps_dot};
use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

/// `Q = Σ_j σ_j ⊗ σ_j`; its Fourier symbol is `-kᵀQk = -σ²(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllipticOperator {
    pub q: [[f64; 2]; 2],
}

impl EllipticOperator {
    pub fn from_sigmas(sigmas: &[Vec2]) -> Self {
        let mut q = [[0.0; 2]; 2];
        for s in sigmas {
            for a in 0..2 {
                for b in 0..2 {
                    q[a][b] += s[a] * s[b];
                }
            }
        }
        Self { q }
    }

    /// `kᵀQk`.
    pub fn quadratic_form(&self, k: Vec2) -> f64 {
        let q = &self.q;
        k[0] * (q[0][0] * k[0] + q[0][1] * k[1]) + k[1] * (q[1][0] * k[0] + q[1][1] * k[1])
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let q = &self.q;
        let tr = q[0][0] + q[1][1];
        let det = q[0][0] * q[1][1] - q[0][1] * q[1][0];
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        [0.5 * tr - disc, 0.5 * tr + disc]
    }
}

fn heat(p: &SpectralProblem, k: Vec2, t: f64) -> f64 {
    (-p.kappa * norm2(k) * t).exp()
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn mean_from_gamma(p: &SpectralProblem, k: Vec2, t: f64, g: f64) -> Complex64 {
    p.theta0_hat(k) * heat(p, k, t) * (-0.5 * p.sigma2(k) * g).exp()
}

/// `e(t,k) = θ̂₀(k) e^{-κ|k|²t - ½σ²(k)γ(t)}`.
pub fn mean_closed(p: &SpectralProblem, kern: &KernelSpec, t: f64, k: Vec2) -> Result<Complex64> {
    Ok(mean_from_gamma(p, k, t, kern.gamma(t)?))
}

fn cov_from_gamma(p: &SpectralProblem, k: Vec2, q: Vec2, t: f64, g: f64) -> Complex64 {
    let noise = (-0.5 * p.sigma2(sub(k, q)) * g).exp()
        - (-0.5 * (p.sigma2(k) + p.sigma2(q)) * g).exp();
    p.theta0_hat(k) * p.theta0_hat(q).conj() * (heat(p, k, t) * heat(p, q, t) * noise)
}

/// `C(t,k,q) = Cov(θ̂(t,k), θ̂(t,q))` in the limit.
pub fn cov_closed(p: &SpectralProblem, kern: &KernelSpec, t: f64, k: Vec2, q: Vec2) -> Result<Complex64> {
    Ok(cov_from_gamma(p, k, q, t, kern.gamma(t)?))
}

fn refuse_singular(kern: &KernelSpec, horizon: f64) -> Result<()> {
    let class = kern.classify(horizon);
    if !class.is_regular() {
        return Err(Error::SingularKernel(format!(
            "{}: {}; only the closed forms apply",
            kern.label(),
            class.reason
        )));
    }
    Ok(())
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.first() != Some(&0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::GridMismatch(
            "time grid must start at 0 and increase strictly".into(),
        ));
    }
    Ok(())
}

fn rk4_step<F>(f: &F, t: f64, y: Complex64, h: f64) -> Result<Complex64>
where
    F: Fn(f64, Complex64) -> Result<Complex64>,
{
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * h, y + 0.5 * h * k1)?;
    let k3 = f(t + 0.5 * h, y + 0.5 * h * k2)?;
    let k4 = f(t + h, y + h * k3)?;
    Ok(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Mean of one mode at finite ε, by RK4 and by the exponential formula.
#[derive(Debug, Clone, Serialize)]
pub struct MeanOde {
    pub k: Vec2,
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub rk4: Vec<Complex64>,
    /// `θ̂₀ e^{-κ|k|²t - σ²(k) V_ε(t)}`.
    pub exponential: Vec<Complex64>,
}

impl MeanOde {
    pub fn max_discrepancy(&self) -> f64 {
        self.rk4
            .iter()
            .zip(&self.exponential)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Integration nodes: each segment between consecutive kinks of `V̇_ε`
/// (`0, ε, 2ε, 3ε`) is meshed with steps near `ε/64`, graded cubically
/// toward both ends, and merged with `t_grid`.
fn graded_nodes(epsilon: f64, t_grid: &[f64]) -> Vec<f64> {
    let horizon = *t_grid.last().expect("nonempty grid");
    let mut bps = vec![0.0];
    bps.extend([epsilon, 2.0 * epsilon, 3.0 * epsilon].into_iter().filter(|&c| c < horizon));
    bps.push(horizon);
    let grade = |u: f64| {
        if u <= 0.5 {
            0.5 * (2.0 * u).powi(3)
        } else {
            1.0 - 0.5 * (2.0 * (1.0 - u)).powi(3)
        }
    };
    let mut nodes: Vec<f64> = t_grid.to_vec();
    for w in bps.windows(2) {
        let len = w[1] - w[0];
        let n = (len / (epsilon / 64.0)).ceil().max(2.0) as usize;
        nodes.extend((0..=n).map(|i| w[0] + len * grade(i as f64 / n as f64)));
    }
    nodes.sort_by(f64::total_cmp);
    nodes.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * horizon.max(1.0));
    nodes
}

/// Integrate `de = -κ|k|²e dt - σ²(k) e dV_ε` on `t_grid`.
///
/// RK4 runs on a mesh graded toward the points where `V̇_ε` loses
/// smoothness, so the fractional-power behaviour there keeps fourth order.
pub fn mean_ode(
    p: &SpectralProblem,
    kern: &KernelSpec,
    epsilon: f64,
    t_grid: &[f64],
    k: Vec2,
) -> Result<MeanOde> {
    check_grid(t_grid)?;
    let horizon = *t_grid.last().expect("nonempty grid");
    refuse_singular(kern, horizon)?;
    let (a, s2) = (p.kappa * norm2(k), p.sigma2(k));
    let mut nodes = graded_nodes(epsilon, t_grid);
    // snap to the exact grid values so outputs line up
    for &t in t_grid {
        let i = nodes.partition_point(|&x| x < t - 1e-14 * horizon.max(1.0));
        nodes[i] = t;
    }
    // rates at nodes (even slots) and midpoints (odd slots)
    let samples: Vec<f64> = (0..2 * nodes.len() - 1)
        .map(|i| {
            if i % 2 == 0 {
                nodes[i / 2]
            } else {
                0.5 * (nodes[i / 2] + nodes[i / 2 + 1])
            }
        })
        .collect();
    let rates = samples
        .par_iter()
        .map(|&t| Ok(-(a + s2 * veps_dot(kern, epsilon, t)?)))
        .collect::<Result<Vec<f64>>>()?;

    let mut rk4 = Vec::with_capacity(t_grid.len());
    let mut e = p.theta0_hat(k);
    let mut next = 0;
    for i in 0..nodes.len() {
        if i > 0 {
            let h = nodes[i] - nodes[i - 1];
            let (r0, rm, r1) = (rates[2 * i - 2], rates[2 * i - 1], rates[2 * i]);
            let k1 = r0 * e;
            let k2 = rm * (e + 0.5 * h * k1);
            let k3 = rm * (e + 0.5 * h * k2);
            let k4 = r1 * (e + h * k3);
            e += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        if next < t_grid.len() && nodes[i] == t_grid[next] {
            rk4.push(e);
            next += 1;
        }
    }
    debug_assert_eq!(rk4.len(), t_grid.len());

    let curve = veps_cumulative(kern, epsilon, t_grid)?;
    let c0 = p.theta0_hat(k);
    let exponential = t_grid
        .iter()
        .zip(&curve.v)
        .map(|(&t, &v)| c0 * (-a * t - s2 * v).exp())
        .collect();
    Ok(MeanOde {
        k,
        epsilon,
        times: t_grid.to_vec(),
        rk4,
        exponential,
    })
}

/// RK4 for `C(t,k,q)` on `t_grid`, driven by the closed-form mean.
///
/// Time is reparametrized as `t = u^m` so that `dγ/du` is smooth at the
/// origin for kernels with `dγ/dt ~ t^{2H-1}`, and each grid interval is
/// split into substeps of equal length in `u`.
pub fn cov_ode(
    p: &SpectralProblem,
    kern: &KernelSpec,
    t_grid: &[f64],
    k: Vec2,
    q: Vec2,
) -> Result<Vec<Complex64>> {
    check_grid(t_grid)?;
    let horizon = *t_grid.last().expect("nonempty grid");
    refuse_singular(kern, horizon)?;
    let m = kern.clock_power() as f64;
    let damping = p.kappa * (norm2(k) + norm2(q));
    let half_diff = 0.5 * p.sigma2(sub(k, q));
    let rho = p.rho(k, q);
    let rhs = |u: f64, c: Complex64| -> Result<Complex64> {
        let t = u.powf(m);
        let dt_du = if m == 1.0 { 1.0 } else { m * u.powf(m - 1.0) };
        let g = kern.gamma(t)?;
        let dg = kern.dgamma(t)?;
        let source = mean_from_gamma(p, k, t, g) * mean_from_gamma(p, q, t, g).conj();
        Ok(((-damping - half_diff * dg) * c + rho * dg * source) * dt_du)
    };
    let us: Vec<f64> = t_grid.iter().map(|t| t.powf(1.0 / m)).collect();
    let du_min = us.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);

    let mut out = Vec::with_capacity(t_grid.len());
    let mut c = Complex64::new(0.0, 0.0);
    out.push(c);
    for w in us.windows(2) {
        let n = ((w[1] - w[0]) / du_min - 1e-9).ceil().max(1.0) as usize;
        let h = (w[1] - w[0]) / n as f64;
        for i in 0..n {
            c = rk4_step(&rhs, w[0] + i as f64 * h, c, h)?;
        }
        out.push(c);
    }
    Ok(out)
}

/// Limiting mean field `θ̄(t, ·)` on the problem's spatial grid.
pub fn mean_physical(p: &SpectralProblem, kern: &KernelSpec, t: f64) -> Result<PhysicalField> {
    let g = kern.gamma(t)?;
    let spec = p.lattice.spectrum(|k| mean_from_gamma(p, k, t, g));
    Reconstructor::new(p.lattice).apply(&spec)
}

fn fd_weights(h: f64) -> [(f64, f64); 4] {
    let w = 1.0 / (12.0 * h);
    [(-2.0 * h, w), (-h, -8.0 * w), (h, 8.0 * w), (2.0 * h, -w)]
}

fn fd_step(t: f64) -> f64 {
    (1e-4 * t.max(1e-3)).min(0.2 * t)
}

/// Max over the lattice of `|∂ₜê - (-κ|k|² - ½σ²(k)γ'(t)) ê|`, relative to
/// `max|θ̂₀|`, with a fourth-order difference quotient in time.
pub fn mean_pde_residual(p: &SpectralProblem, kern: &KernelSpec, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("residual needs t > 0, got {t}")));
    }
    let h = fd_step(t);
    let stencil = fd_weights(h);
    let gammas: Vec<f64> = stencil
        .iter()
        .map(|(o, _)| kern.gamma(t + o))
        .collect::<Result<_>>()?;
    let (g, dg) = (kern.gamma(t)?, kern.dgamma(t)?);
    let n = p.lattice.n;
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = p.lattice.wavevector(i, j);
            scale = scale.max(p.theta0_hat(k).norm());
            let dt: Complex64 = stencil
                .iter()
                .zip(&gammas)
                .map(|((o, w), &gs)| *w * mean_from_gamma(p, k, t + o, gs))
                .sum();
            let rhs = -(p.kappa * norm2(k) + 0.5 * p.sigma2(k) * dg) * mean_from_gamma(p, k, t, g);
            worst = worst.max((dt - rhs).norm());
        }
    }
    Ok(worst / scale)
}

/// Tensor grid of evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl PointGrid {
    /// `n × n` points spaced uniformly on `[-half, half]`.
    pub fn square(half: f64, n: usize) -> Self {
        let xs: Vec<f64> = (0..n)
            .map(|i| -half + 2.0 * half * i as f64 / (n - 1).max(1) as f64)
            .collect();
        Self { ys: xs.clone(), xs }
    }
}

/// Modes of a lattice inside the disc `|ξ| ≤ ξ_max`, as (index, wavevector).
fn disc_modes(lat: &crate::spectral::Lattice) -> Vec<([i64; 2], Vec2)> {
    let r = lat.xi_max();
    let mut out = Vec::new();
    for i in 0..lat.n {
        for j in 0..lat.n {
            let m = [lat.index(i), lat.index(j)];
            let xi = [m[0] as f64 * lat.dxi, m[1] as f64 * lat.dxi];
            if norm2(xi) <= r * r {
                out.push((m, lat.wavevector(i, j)));
            }
        }
    }
    out
}

/// Limiting variance `V(t,x)` by direct summation over mode pairs of a
/// reduced lattice (the disc `|ξ| ≤ reduced.xi_max()`).
pub fn variance_physical(
    p: &SpectralProblem,
    kern: &KernelSpec,
    t: f64,
    reduced: &crate::spectral::Lattice,
    grid: &PointGrid,
) -> Result<Array2<f64>> {
    let g = kern.gamma(t)?;
    let modes = disc_modes(reduced);
    let nm = reduced.n as i64;
    let side = (2 * nm + 1) as usize;
    let s = 2.0 * std::f64::consts::PI * reduced.dxi;
    // e^{-½σ²(k-q)γ} depends on k-q only
    let table: Vec<f64> = (0..side * side)
        .map(|idx| {
            let d = [
                (idx / side) as i64 - nm,
                (idx % side) as i64 - nm,
            ];
            (-0.5 * p.sigma2([s * d[0] as f64, s * d[1] as f64]) * g).exp()
        })
        .collect();
    let base: Vec<Complex64> = modes
        .iter()
        .map(|(_, k)| p.theta0_hat(*k) * heat(p, *k, t))
        .collect();
    let damp: Vec<f64> = modes
        .iter()
        .map(|(_, k)| (-0.5 * p.sigma2(*k) * g).exp())
        .collect();
    let w = reduced.dxi.powi(4);

    let rows: Vec<Vec<f64>> = grid
        .xs
        .par_iter()
        .map(|&x| {
            grid.ys
                .iter()
                .map(|&y| {
                    let a: Vec<Complex64> = modes
                        .iter()
                        .zip(&base)
                        .map(|((_, k), b)| b * Complex64::from_polar(1.0, dot(*k, [x, y])))
                        .collect();
                    let mut pair = 0.0;
                    for (ia, (mi, _)) in modes.iter().enumerate() {
                        let ai = a[ia];
                        pair += ai.norm_sqr() * table[(nm as usize) * side + nm as usize];
                        let mut acc = Complex64::new(0.0, 0.0);
                        for (jb, (mj, _)) in modes.iter().enumerate().skip(ia + 1) {
                            let d0 = (mi[0] - mj[0] + nm) as usize;
                            let d1 = (mi[1] - mj[1] + nm) as usize;
                            acc += a[jb].conj() * table[d0 * side + d1];
                        }
                        pair += 2.0 * (ai * acc).re;
                    }
                    let mean: Complex64 = a.iter().zip(&damp).map(|(ai, d)| ai * d).sum();
                    w * (pair - mean.norm_sqr())
                })
                .collect()
        })
        .collect();
    let out = Array2::from_shape_fn((grid.xs.len(), grid.ys.len()), |(i, j)| rows[i][j]);
    if let Some(v) = out.iter().find(|v| **v < -1e-9) {
        return Err(Error::Domain(format!("negative variance {v} from pair summation")));
    }
    Ok(out)
}

/// Limiting variance on the problem's spatial grid via
/// `E θ² = (θ_h²) * N(0, γQ)` where `θ_h` is the heat-evolved datum.
pub fn variance_dual(p: &SpectralProblem, kern: &KernelSpec, t: f64) -> Result<PhysicalField> {
    let g = kern.gamma(t)?;
    let rec = Reconstructor::new(p.lattice);
    let th = rec.apply(&p.shifted_spectrum(t, [0.0, 0.0]))?;
    let mut sq_hat = rec.forward(&th.values.mapv(|v| v * v));
    for ((i, j), c) in sq_hat.indexed_iter_mut() {
        *c *= (-0.5 * p.sigma2(p.lattice.wavevector(i, j)) * g).exp();
    }
    let second = rec.apply(&sq_hat)?;
    let mean = mean_physical(p, kern, t)?;
    Ok(PhysicalField {
        lattice: p.lattice,
        values: &second.values - &mean.values.mapv(|v| v * v),
    })
}

/// Fourier-side residual of the variance equation at `κ = 0`,
/// `∂ₜV = γ'(t) (½ L V + Σ_j ((σ_j·∇)θ̄)²)`.
///
/// For each difference wavevector `p` of the reduced disc lattice,
/// `V̂(p) = dξ² Σ_q C(q+p, q)`; the return value is the largest residual
/// relative to the largest term of the equation.
pub fn variance_pde_residual(
    p: &SpectralProblem,
    kern: &KernelSpec,
    t: f64,
    reduced: &crate::spectral::Lattice,
) -> Result<f64> {
    if p.kappa != 0.0 {
        return Err(Error::InvalidParameter(
            "the variance equation closes in V only for kappa = 0".into(),
        ));
    }
    if !(t > 0.0) {
        return Err(Error::Domain(format!("residual needs t > 0, got {t}")));
    }
    let modes = disc_modes(reduced);
    let index: std::collections::HashMap<[i64; 2], usize> =
        modes.iter().enumerate().map(|(i, (m, _))| (*m, i)).collect();
    let h = fd_step(t);
    let stencil = fd_weights(h);
    let gs: Vec<f64> = stencil
        .iter()
        .map(|(o, _)| kern.gamma(t + o))
        .collect::<Result<_>>()?;
    let (g, dg) = (kern.gamma(t)?, kern.dgamma(t)?);
    let nm = reduced.n as i64;
    let s = 2.0 * std::f64::consts::PI * reduced.dxi;

    let diffs: Vec<[i64; 2]> = (-nm..=nm)
        .flat_map(|a| (-nm..=nm).map(move |b| [a, b]))
        .collect();
    let per_diff: Vec<(f64, f64)> = diffs
        .par_iter()
        .map(|d| {
            let pv = [s * d[0] as f64, s * d[1] as f64];
            let (mut vhat, mut dv, mut src) = (Complex64::default(), Complex64::default(), Complex64::default());
            for (mq, q) in &modes {
                let Some(&ik) = index.get(&[mq[0] + d[0], mq[1] + d[1]]) else {
                    continue;
                };
                let k = modes[ik].1;
                vhat += cov_from_gamma(p, k, *q, t, g);
                for ((o, w), &go) in stencil.iter().zip(&gs) {
                    dv += *w * cov_from_gamma(p, k, *q, t + o, go);
                }
                src += p.rho(k, *q) * mean_from_gamma(p, k, t, g) * mean_from_gamma(p, *q, t, g).conj();
            }
            let rhs = dg * (-0.5 * p.sigma2(pv) * vhat + src);
            ((dv - rhs).norm(), dv.norm().max(rhs.norm()))
        })
        .collect();
    let worst = per_diff.iter().map(|r| r.0).fold(0.0, f64::max);
    let scale = per_diff.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

/// Fitted small-time power laws of the mean deviation and the spread.
#[derive(Debug, Clone, Serialize)]
pub struct Exponents {
    pub slope_mean: f64,
    pub slope_sd: f64,
    /// `(t, ‖θ̄(t) - θ₀‖₂, ‖√V(t)‖₂)`.
    pub samples: Vec<(f64, f64, f64)>,
}

/// Least-squares slopes of `log‖θ̄ - θ₀‖₂` and `log‖√V‖₂` against `log t`
/// at `κ = 0`, both norms computed by Parseval on the problem's lattice.
pub fn smalltime_exponents(p: &SpectralProblem, kern: &KernelSpec, ts: &[f64]) -> Result<Exponents> {
    if p.kappa != 0.0 {
        return Err(Error::InvalidParameter(
            "small-time exponents are defined for kappa = 0".into(),
        ));
    }
    if ts.len() < 2 || ts.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidParameter(
            "need at least two positive times".into(),
        ));
    }
    let lat = &p.lattice;
    let weights: Vec<(f64, f64)> = (0..lat.n * lat.n)
        .map(|idx| {
            let k = lat.wavevector(idx / lat.n, idx % lat.n);
            (p.theta0_hat(k).norm_sqr(), p.sigma2(k))
        })
        .collect();
    let dxi2 = lat.dxi * lat.dxi;
    let samples = ts
        .iter()
        .map(|&t| {
            let g = kern.gamma(t)?;
            let (mut dev, mut var) = (0.0, 0.0);
            for &(a, s2) in &weights {
                dev += a * (-(-0.5 * s2 * g).exp_m1()).powi(2);
                var += a * -(-s2 * g).exp_m1();
            }
            Ok((t, (dev * dxi2).sqrt(), (var * dxi2).sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let slope = |ys: Vec<f64>| {
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    };
    Ok(Exponents {
        slope_mean: slope(samples.iter().map(|s| s.1.ln()).collect()),
        slope_sd: slope(samples.iter().map(|s| s.2.ln()).collect()),
        samples,
    })
}

/// `count` log-spaced times in `[lo, hi]`.
pub fn log_times(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (count - 1).max(1) as f64).exp())
        .collect()
}
