//! Two-scale transport on the unit torus `[0,1)²`: Itô white-noise transport
//! by a shell of small-scale divergence-free fields with its corrector, plus
//! constant-σ transport by the regularized large-scale drive.
//!
//! The state is kept as Fourier coefficients `θ̂(m)`, `θ(x) = Σ θ̂(m) e^{2πi m·x}`.
//! One step of length `Δt` is
//!
//! ```text
//! θ ← H · T · (θ + P[(u·∇)θ]),   u = Σ_j v_j ΔW_j
//! ```
//!
//! with `H = e^{-(κ+κ_T)|2πm|²Δt}`, `T = e^{2πi m·Δs}` for the drive shift
//! `s = Σ σ_k 𝒢^{k,ε}`, and `P` the 2/3-rule projection.

use crate::ensemble::CHUNK;
use crate::error::{Error, Result};
use crate::fft2::Fft2;
use crate::kernel::KernelSpec;
use crate::sampler::{regularize, stream_rng, PathSampler, RegularizedDrive};
use crate::spectral::{GaussianBump, InitialDatum, Vec2};
use crate::stats::{Comoments, ScalarMoments};
use ndarray::Array2;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

const TAU: f64 = 2.0 * PI;

fn freq(i: usize, n: usize) -> i64 {
    if i < n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

fn slot(m: i64, n: usize) -> usize {
    m.rem_euclid(n as i64) as usize
}

/// `a cos(2πm·x) + b sin(2πm·x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub m: [i64; 2],
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// A real function on the torus with an explicit Fourier series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TorusField {
    /// Trigonometric polynomial.
    Trig {
        #[serde(default)]
        constant: f64,
        terms: Vec<TrigTerm>,
    },
    /// Periodized Gaussian bumps.
    Gaussians { bumps: Vec<GaussianBump> },
}

impl TorusField {
    pub fn trig(constant: f64, terms: Vec<TrigTerm>) -> Self {
        TorusField::Trig { constant, terms }
    }

    pub fn coefficient(&self, m: [i64; 2]) -> Complex64 {
        match self {
            TorusField::Trig { constant, terms } => {
                let mut c = Complex64::new(if m == [0, 0] { *constant } else { 0.0 }, 0.0);
                for t in terms {
                    if t.m == [0, 0] {
                        if m == [0, 0] {
                            c += t.cos;
                        }
                        continue;
                    }
                    if t.m == m {
                        c += Complex64::new(t.cos, -t.sin) * 0.5;
                    }
                    if t.m == [-m[0], -m[1]] {
                        c += Complex64::new(t.cos, t.sin) * 0.5;
                    }
                }
                c
            }
            TorusField::Gaussians { bumps } => InitialDatum { bumps: bumps.clone() }
                .transform([TAU * m[0] as f64, TAU * m[1] as f64]),
        }
    }

    /// Coefficients on an `n × n` index grid.
    pub fn spectrum(&self, n: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((n, n), |(i, j)| self.coefficient([freq(i, n), freq(j, n)]))
    }

    /// Largest `|m|∞` carrying a coefficient above `1e-14` of the largest one.
    pub fn band(&self, n: usize) -> i64 {
        let s = self.spectrum(n);
        let peak = s.iter().map(|c| c.norm()).fold(0.0, f64::max);
        s.indexed_iter()
            .filter(|(_, c)| c.norm() > 1e-14 * peak)
            .map(|((i, j), _)| freq(i, n).abs().max(freq(j, n).abs()))
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TorusField::Trig { constant, terms } => {
                if !constant.is_finite() || terms.iter().any(|t| !(t.cos.is_finite() && t.sin.is_finite())) {
                    return Err(Error::InvalidParameter("trigonometric coefficients must be finite".into()));
                }
                Ok(())
            }
            TorusField::Gaussians { bumps } => InitialDatum { bumps: bumps.clone() }.validate(),
        }
    }

    /// `‖f‖²_{L²}` by Parseval on the `n × n` index grid.
    pub fn l2_norm_sq(&self, n: usize) -> f64 {
        self.spectrum(n).iter().map(|c| c.norm_sqr()).sum()
    }

    /// `max |f|` sampled on a `4n × 4n` grid.
    pub fn sup_norm(&self, n: usize) -> Result<f64> {
        let fine = 4 * n;
        let fft = Fft2::new(fine);
        let mut buf = vec![Complex64::new(0.0, 0.0); fine * fine];
        let band = self.band(n);
        for a in -band..=band {
            for b in -band..=band {
                buf[slot(a, fine) * fine + slot(b, fine)] = self.coefficient([a, b]);
            }
        }
        fft.inverse(&mut buf);
        Ok(buf.iter().map(|c| c.re.abs()).fold(0.0, f64::max))
    }
}

/// Divergence-free fields `c k̂^⊥ cos(2πk·x)`, `c k̂^⊥ sin(2πk·x)` over the
/// lattice half-shell `N ≤ |k| ≤ 2N`, `c² = 2κ_T/|shell|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallScaleFamily {
    pub scale: u32,
    pub modes: Vec<[i64; 2]>,
    pub amplitude: f64,
}

impl SmallScaleFamily {
    pub fn empty() -> Self {
        Self {
            scale: 0,
            modes: vec![],
            amplitude: 0.0,
        }
    }

    /// Half-shell at scale `N` calibrated so that `Q⁰(x,x) = κ_T Id`.
    pub fn shell(scale: u32, kappa_t: f64) -> Result<Self> {
        if !(kappa_t >= 0.0 && kappa_t.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa_T must be nonnegative, got {kappa_t}")));
        }
        if scale == 0 || kappa_t == 0.0 {
            return Ok(Self::empty());
        }
        let n = scale as i64;
        let mut modes = Vec::new();
        for m2 in 0..=2 * n {
            for m1 in -2 * n..=2 * n {
                let r2 = m1 * m1 + m2 * m2;
                let upper = m2 > 0 || m1 > 0;
                if upper && r2 >= n * n && r2 <= 4 * n * n {
                    modes.push([m1, m2]);
                }
            }
        }
        let amplitude = (2.0 * kappa_t / modes.len() as f64).sqrt();
        Ok(Self {
            scale,
            modes,
            amplitude,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Number of fields (two per shell mode).
    pub fn len(&self) -> usize {
        2 * self.modes.len()
    }

    pub fn kappa_t(&self) -> f64 {
        0.5 * self.amplitude * self.amplitude * self.modes.len() as f64
    }

    /// `c k̂^⊥` for shell mode `i`.
    pub fn direction(&self, i: usize) -> Vec2 {
        let [a, b] = self.modes[i];
        let r = ((a * a + b * b) as f64).sqrt();
        [-(b as f64) / r * self.amplitude, a as f64 / r * self.amplitude]
    }

    /// Field `j`: even `j` is the cosine of mode `j/2`, odd the sine.
    pub fn field(&self, j: usize, x: Vec2) -> Vec2 {
        let m = self.modes[j / 2];
        let ph = TAU * (m[0] as f64 * x[0] + m[1] as f64 * x[1]);
        let w = if j % 2 == 0 { ph.cos() } else { ph.sin() };
        let d = self.direction(j / 2);
        [d[0] * w, d[1] * w]
    }

    /// `Q⁰(x,x) = Σ_j v_j(x) ⊗ v_j(x)`, summed field by field.
    pub fn diagonal(&self, x: Vec2) -> [[f64; 2]; 2] {
        let mut q = [[0.0; 2]; 2];
        for j in 0..self.len() {
            let v = self.field(j, x);
            for a in 0..2 {
                for b in 0..2 {
                    q[a][b] += v[a] * v[b];
                }
            }
        }
        q
    }

    /// Largest `|m|` over the shell.
    pub fn max_wavenumber(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| ((m[0] * m[0] + m[1] * m[1]) as f64).sqrt())
            .fold(0.0, f64::max)
    }

    /// `max |m·v̂_j(m)|` over all fields; the direction `(-m₂, m₁)` is
    /// integral, so the product is evaluated exactly before scaling.
    pub fn fourier_divergence(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| {
                let r = ((m[0] * m[0] + m[1] * m[1]) as f64).sqrt();
                (m[0] * -m[1] + m[1] * m[0]).abs() as f64 * self.amplitude / r
            })
            .fold(0.0, f64::max)
    }
}

/// `‖𝕼⁰‖_{L²→L²}`: the fields are orthogonal with `‖v_j‖² = c²/2`.
pub fn q_operator_norm(f: &SmallScaleFamily) -> f64 {
    if f.is_empty() {
        0.0
    } else {
        0.5 * f.amplitude * f.amplitude
    }
}

/// Power iteration for `‖𝕼⁰‖`, applying `w ↦ Σ_j v_j ⟨v_j, w⟩` with FFTs on an
/// `n × n` grid.
pub fn q_operator_norm_power(f: &SmallScaleFamily, n: usize, iterations: usize, seed: u64) -> Result<f64> {
    if f.is_empty() {
        return Ok(0.0);
    }
    let need = 2.0 * f.max_wavenumber();
    if (n as f64) <= need {
        return Err(Error::InvalidParameter(format!(
            "grid {n} cannot represent wavenumber {}",
            f.max_wavenumber()
        )));
    }
    let fft = Fft2::new(n);
    let nn = n * n;
    let mut rng = stream_rng(seed, &[u64::MAX - 1]);
    let mut w: [Vec<f64>; 2] = [0, 1].map(|_| (0..nn).map(|_| StandardNormal.sample(&mut rng)).collect());
    let apply = |w: &[Vec<f64>; 2]| -> [Vec<f64>; 2] {
        let hat: Vec<Vec<Complex64>> = w
            .iter()
            .map(|c| {
                let mut b: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft.forward(&mut b);
                b.iter().map(|z| z / nn as f64).collect()
            })
            .collect();
        let mut out = [vec![Complex64::new(0.0, 0.0); nn], vec![Complex64::new(0.0, 0.0); nn]];
        for (i, m) in f.modes.iter().enumerate() {
            let d = f.direction(i);
            let (p, q) = (slot(m[0], n) * n + slot(m[1], n), slot(-m[0], n) * n + slot(-m[1], n));
            // v̂_cos(±m) = d/2, v̂_sin(±m) = ∓ i d/2
            let vc = [(p, Complex64::new(0.5, 0.0)), (q, Complex64::new(0.5, 0.0))];
            let vs = [(p, Complex64::new(0.0, -0.5)), (q, Complex64::new(0.0, 0.5))];
            for v in [vc, vs] {
                let mut ip = Complex64::new(0.0, 0.0);
                for &(idx, coef) in &v {
                    for a in 0..2 {
                        ip += (coef * d[a]).conj() * hat[a][idx];
                    }
                }
                for &(idx, coef) in &v {
                    for a in 0..2 {
                        out[a][idx] += coef * d[a] * ip.re;
                    }
                }
            }
        }
        out.map(|mut b| {
            fft.inverse(&mut b);
            b.iter().map(|z| z.re).collect()
        })
    };
    let norm = |w: &[Vec<f64>; 2]| (w.iter().flatten().map(|v| v * v).sum::<f64>() / nn as f64).sqrt();
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let qw = apply(&w);
        let num: f64 = w.iter().zip(&qw).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).sum();
        let den: f64 = w.iter().flatten().map(|v| v * v).sum();
        estimate = num / den;
        let s = norm(&qw);
        if s == 0.0 {
            return Ok(0.0);
        }
        w = qw.map(|c| c.iter().map(|v| v / s).collect());
    }
    Ok(estimate)
}

/// Configuration of a two-scale run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TorusProblem {
    /// Grid size `n` of the `n × n` torus discretization.
    pub n: usize,
    pub kappa: f64,
    pub kappa_t: f64,
    pub family: SmallScaleFamily,
    pub sigmas: Vec<Vec2>,
    pub kernel: KernelSpec,
    pub epsilon: f64,
    pub dt: f64,
    pub t_final: f64,
    pub datum: TorusField,
}

impl TorusProblem {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 || self.n % 2 != 0 {
            return Err(Error::InvalidParameter(format!("grid size must be even and at least 8, got {}", self.n)));
        }
        if !(self.kappa >= 0.0 && self.kappa_t >= 0.0 && self.kappa + self.kappa_t > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need kappa, kappa_T >= 0 with kappa + kappa_T > 0, got {} and {}",
                self.kappa, self.kappa_t
            )));
        }
        if !self.family.is_empty() && (self.family.kappa_t() - self.kappa_t).abs() > 1e-12 * self.kappa_t {
            return Err(Error::InvalidParameter(format!(
                "small-scale family is calibrated to kappa_T = {}, problem has {}",
                self.family.kappa_t(),
                self.kappa_t
            )));
        }
        for (name, v) in [("epsilon", self.epsilon), ("dt", self.dt), ("t_final", self.t_final)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        self.datum.validate()?;
        let shell = self.family.modes.iter().map(|m| m[0].abs().max(m[1].abs())).max().unwrap_or(0);
        let band = self.datum.band(self.n);
        if !self.family.is_empty() && 3 * (shell + band) > self.n as i64 {
            return Err(Error::GridMismatch(format!(
                "grid {} resolves |m| <= {} after dealiasing, but shell ({shell}) plus datum band ({band}) needs {}",
                self.n,
                self.n / 3,
                shell + band
            )));
        }
        if !self.family.is_empty() {
            let limit = 0.25 / self.family.max_wavenumber();
            if (2.0 * self.kappa_t * self.dt).sqrt() > limit {
                return Err(Error::Cfl {
                    dt: self.dt,
                    suggested_dt: limit * limit / (2.0 * self.kappa_t),
                });
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(1.0) as usize
    }

    /// Step actually used: `t_final / n_steps`.
    pub fn step(&self) -> f64 {
        self.t_final / self.n_steps() as f64
    }

    fn path_sampler(&self) -> Result<Option<PathSampler>> {
        if self.sigmas.is_empty() {
            return Ok(None);
        }
        let dt = self.epsilon / 4.0;
        let steps = ((self.t_final + self.epsilon) / dt * (1.0 - 1e-12)).ceil() as usize;
        PathSampler::new(&self.kernel, dt, steps).map(Some)
    }
}

/// Random input of one replica at the finest level: Brownian increments for
/// every small-scale field and the drive shift at every fine step.
#[derive(Debug, Clone)]
pub struct ReplicaNoise {
    pub levels: u32,
    pub n_fields: usize,
    /// Row-major `n_fine × n_fields`.
    pub dw: Vec<f64>,
    pub shifts: Vec<Vec2>,
    pub drive: RegularizedDrive,
}

impl ReplicaNoise {
    fn draw(tp: &TorusProblem, sampler: Option<&PathSampler>, seed: u64, replica: u64, levels: u32) -> Result<Self> {
        let n_fine = tp.n_steps() << levels;
        let h = tp.step() / (1u64 << levels) as f64;
        let times: Vec<f64> = (0..=n_fine).map(|i| (i as f64 * h).min(tp.t_final)).collect();
        let drive = match sampler {
            Some(s) => regularize(&s.sample_replica(seed, replica, tp.sigmas.len()), tp.epsilon, &times)?,
            None => RegularizedDrive::zero(0, &times),
        };
        let shifts = (0..times.len())
            .map(|i| {
                tp.sigmas.iter().zip(&drive.g_values).fold([0.0, 0.0], |a, (s, g)| {
                    [a[0] + s[0] * g[i], a[1] + s[1] * g[i]]
                })
            })
            .collect();
        let n_fields = tp.family.len();
        let mut rng = stream_rng(seed, &[u64::MAX, replica]);
        let sd = h.sqrt();
        let dw = (0..n_fine * n_fields)
            .map(|_| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        Ok(Self {
            levels,
            n_fields,
            dw,
            shifts,
            drive,
        })
    }

    /// Increments and shifts at refinement `level ≤ levels`.
    fn at_level(&self, level: u32) -> (Vec<f64>, Vec<Vec2>) {
        let group = 1usize << (self.levels - level);
        let nf = self.n_fields;
        let n_fine = self.shifts.len() - 1;
        let steps = n_fine / group;
        let mut dw = vec![0.0; steps * nf];
        for s in 0..steps {
            for g in 0..group {
                let src = &self.dw[(s * group + g) * nf..(s * group + g + 1) * nf];
                for (d, v) in dw[s * nf..(s + 1) * nf].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let shifts = self.shifts.iter().step_by(group).copied().collect();
        (dw, shifts)
    }
}

/// Precomputed per-grid data for stepping.
struct Stepper {
    n: usize,
    fft: Fft2,
    heat: Vec<f64>,
    keep: Vec<bool>,
    family: SmallScaleFamily,
    mode_slots: Vec<(usize, usize)>,
    dt: f64,
}

/// Energy bookkeeping of one Itô increment: `(‖θ + P(u·∇θ)‖² - ‖θ‖², Δt ‖∇θ‖²)`.
type EnergyProbe = (f64, f64);

impl Stepper {
    fn new(tp: &TorusProblem, dt: f64, diffusivity: f64) -> Self {
        let n = tp.n;
        let cut = (n / 3) as i64;
        let mut heat = vec![0.0; n * n];
        let mut keep = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (freq(i, n), freq(j, n));
                heat[i * n + j] = (-diffusivity * TAU * TAU * (a * a + b * b) as f64 * dt).exp();
                keep[i * n + j] = a.abs() <= cut && b.abs() <= cut;
            }
        }
        let mode_slots = tp
            .family
            .modes
            .iter()
            .map(|m| (slot(m[0], n) * n + slot(m[1], n), slot(-m[0], n) * n + slot(-m[1], n)))
            .collect();
        Self {
            n,
            fft: Fft2::new(n),
            heat,
            keep,
            family: tp.family.clone(),
            mode_slots,
            dt,
        }
    }

    fn step(&self, theta: &mut [Complex64], dw: &[f64], ds: Vec2, scratch: &mut [Vec<Complex64>; 2], probe: bool) -> Option<EnergyProbe> {
        let n = self.n;
        let nn = (n * n) as f64;
        let mut energy = None;
        if !self.family.is_empty() {
            let [g, u] = scratch;
            for i in 0..n {
                let a = freq(i, n) as f64;
                for j in 0..n {
                    let b = freq(j, n) as f64;
                    // ∂xθ + i ∂yθ
                    g[i * n + j] = theta[i * n + j] * Complex64::new(0.0, TAU) * Complex64::new(a, b);
                }
            }
            u.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (k, &(p, q)) in self.mode_slots.iter().enumerate() {
                let d = self.family.direction(k);
                let c = 0.5 * Complex64::new(dw[2 * k], -dw[2 * k + 1]);
                // packed (u_x + i u_y) at +k and -k
                u[p] += c * d[0] + Complex64::i() * c * d[1];
                u[q] += c.conj() * d[0] + Complex64::i() * c.conj() * d[1];
            }
            self.fft.inverse(g);
            self.fft.inverse(u);
            for (gi, ui) in g.iter_mut().zip(u.iter()) {
                *gi = Complex64::new(ui.re * gi.re + ui.im * gi.im, 0.0);
            }
            self.fft.forward(g);
            let before: f64 = if probe { theta.iter().map(|z| z.norm_sqr()).sum() } else { 0.0 };
            let grad: f64 = if probe {
                theta
                    .iter()
                    .enumerate()
                    .map(|(idx, z)| {
                        let (a, b) = (freq(idx / n, n) as f64, freq(idx % n, n) as f64);
                        TAU * TAU * (a * a + b * b) * z.norm_sqr()
                    })
                    .sum()
            } else {
                0.0
            };
            for (idx, t) in theta.iter_mut().enumerate() {
                if self.keep[idx] {
                    *t += g[idx] / nn;
                }
            }
            if probe {
                let after: f64 = theta.iter().map(|z| z.norm_sqr()).sum();
                energy = Some((after - before, self.dt * grad));
            }
        }
        let (ex, ey): (Vec<Complex64>, Vec<Complex64>) = (0..n)
            .map(|i| {
                let a = freq(i, n) as f64;
                (Complex64::from_polar(1.0, TAU * a * ds[0]), Complex64::from_polar(1.0, TAU * a * ds[1]))
            })
            .unzip();
        for i in 0..n {
            for j in 0..n {
                theta[i * n + j] *= ex[i] * ey[j] * self.heat[i * n + j];
            }
        }
        energy
    }
}

/// Snapshots of one replica.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TorusTrajectory {
    pub n: usize,
    pub times: Vec<f64>,
    pub spectra: Vec<Array2<Complex64>>,
}

impl TorusTrajectory {
    pub fn last(&self) -> &Array2<Complex64> {
        self.spectra.last().expect("trajectory has a snapshot")
    }

    /// Grid values `θ(t_i, (a/n, b/n))` of snapshot `i`.
    pub fn field(&self, i: usize) -> Array2<f64> {
        let n = self.n;
        let mut buf: Vec<Complex64> = self.spectra[i].iter().copied().collect();
        Fft2::new(n).inverse(&mut buf);
        Array2::from_shape_vec((n, n), buf.into_iter().map(|z| z.re).collect()).expect("n × n")
    }

    /// `⟨θ(t_i), φ⟩ = Σ θ̂ conj φ̂`.
    pub fn pairing(&self, i: usize, phi: &TorusField) -> f64 {
        pairing(&self.spectra[i], &phi.spectrum(self.n))
    }
}

fn pairing(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x * y.conj()).re).sum()
}

fn l2_dist_sq(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum()
}

struct Runner<'a> {
    tp: &'a TorusProblem,
    sampler: Option<PathSampler>,
    levels: u32,
}

impl<'a> Runner<'a> {
    fn new(tp: &'a TorusProblem, levels: u32) -> Result<Self> {
        tp.validate()?;
        Ok(Self {
            tp,
            sampler: tp.path_sampler()?,
            levels,
        })
    }

    fn noise(&self, seed: u64, r: u64) -> Result<ReplicaNoise> {
        ReplicaNoise::draw(self.tp, self.sampler.as_ref(), seed, r, self.levels)
    }

    /// Integrate one replica at `level`, recording every `record` steps
    /// (0: initial and final only).
    fn integrate(&self, noise: &ReplicaNoise, level: u32, record: usize, energy: Option<&mut Vec<EnergyProbe>>) -> TorusTrajectory {
        let tp = self.tp;
        let n = tp.n;
        let dt = tp.step() / (1u64 << level) as f64;
        let stepper = Stepper::new(tp, dt, tp.kappa + tp.kappa_t);
        let (dw, shifts) = noise.at_level(level);
        let steps = shifts.len() - 1;
        let mut theta: Vec<Complex64> = tp.datum.spectrum(n).into_iter().collect();
        let mut scratch = [vec![Complex64::new(0.0, 0.0); n * n], vec![Complex64::new(0.0, 0.0); n * n]];
        let snap = |th: &[Complex64]| Array2::from_shape_vec((n, n), th.to_vec()).expect("n × n");
        let mut times = vec![0.0];
        let mut spectra = vec![snap(&theta)];
        let nf = noise.n_fields;
        let mut energy = energy;
        for s in 0..steps {
            let ds = [shifts[s + 1][0] - shifts[s][0], shifts[s + 1][1] - shifts[s][1]];
            let probe = stepper.step(&mut theta, &dw[s * nf..(s + 1) * nf], ds, &mut scratch, energy.is_some());
            if let (Some(e), Some(p)) = (energy.as_deref_mut(), probe) {
                e.push(p);
            }
            if s + 1 == steps || (record > 0 && (s + 1) % record == 0) {
                times.push((s + 1) as f64 * dt);
                spectra.push(snap(&theta));
            }
        }
        TorusTrajectory { n, times, spectra }
    }
}

/// One replica of the two-scale system, recorded at every step.
pub fn simulate_two_scale(tp: &TorusProblem, seed: u64) -> Result<TorusTrajectory> {
    simulate_replica(tp, seed, 0, 1)
}

/// Replica `replica`, recorded every `record` steps (0: ends only).
pub fn simulate_replica(tp: &TorusProblem, seed: u64, replica: u64, record: usize) -> Result<TorusTrajectory> {
    let run = Runner::new(tp, 0)?;
    let noise = run.noise(seed, replica)?;
    Ok(run.integrate(&noise, 0, record, None))
}

/// Regularized drive of replica `replica` at the step times.
pub fn replica_drive(tp: &TorusProblem, seed: u64, replica: u64) -> Result<RegularizedDrive> {
    let run = Runner::new(tp, 0)?;
    Ok(run.noise(seed, replica)?.drive)
}

/// Constant-σ transport with diffusivity `diffusivity`, exact per mode, at
/// the drive's times.
pub fn reduced_solve(tp: &TorusProblem, drive: &RegularizedDrive, diffusivity: f64) -> Result<TorusTrajectory> {
    if drive.n_components() != tp.sigmas.len() {
        return Err(Error::GridMismatch(format!(
            "drive has {} components, problem has {} directions",
            drive.n_components(),
            tp.sigmas.len()
        )));
    }
    let n = tp.n;
    let base = tp.datum.spectrum(n);
    let spectra = drive
        .t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let s = tp.sigmas.iter().zip(&drive.g_values).fold([0.0, 0.0], |a, (sg, g)| {
                [a[0] + sg[0] * g[i], a[1] + sg[1] * g[i]]
            });
            Array2::from_shape_fn((n, n), |(a, b)| {
                let m = [freq(a, n) as f64, freq(b, n) as f64];
                let decay = (-diffusivity * TAU * TAU * (m[0] * m[0] + m[1] * m[1]) * t).exp();
                base[[a, b]] * Complex64::from_polar(decay, TAU * (m[0] * s[0] + m[1] * s[1]))
            })
        })
        .collect();
    Ok(TorusTrajectory {
        n,
        times: drive.t_grid.clone(),
        spectra,
    })
}

/// `max_t max_x |θ(t)| - max_x |θ(0)|` on the grid.
pub fn maximum_principle_check(traj: &TorusTrajectory) -> f64 {
    let sup = |i: usize| traj.field(i).iter().map(|v| v.abs()).fold(0.0, f64::max);
    let initial = sup(0);
    (0..traj.spectra.len()).map(sup).fold(f64::NEG_INFINITY, f64::max) - initial
}

/// Per-replica observables of a bound check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaPairing {
    pub replica: u64,
    /// `⟨θ_{ε,N}(T), φ⟩`.
    pub pairing: f64,
    /// `⟨θ_ε(T), φ⟩` at diffusivity `κ + κ_T`.
    pub reduced: f64,
    /// Same at `κ + κ_T/2`.
    pub reduced_half: f64,
}

/// Outcome of the quantitative reduction bound at `t = T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub scale: u32,
    pub n_replicas: u64,
    pub lhs: f64,
    pub se: f64,
    /// Same statistic against the reduced solution at `κ + κ_T/2`.
    pub lhs_half: f64,
    pub se_half: f64,
    pub rhs: f64,
    pub q_norm: f64,
    pub budget: f64,
    pub pass: bool,
    pub records: Vec<ReplicaPairing>,
}

impl BoundCheck {
    pub fn write_ndjson<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r).expect("records serialize"))?;
        }
        Ok(())
    }
}

/// Replicas per budget estimate.
const BUDGET_REPLICAS: u64 = 8;

/// Scheme budget on `⟨θ(T), φ⟩²`: Richardson estimate of the time-step
/// error from `Δt` and `Δt/2` runs sharing noise, assuming order ½.
fn scheme_budget(run: &Runner, seed: u64, phi: &Array2<Complex64>, lhs: f64, replicas: u64) -> Result<f64> {
    let factor = 1.0 / (1.0 - 0.5f64.sqrt());
    let errs = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let noise = run.noise(seed, r)?;
            let a = pairing(run.integrate(&noise, 0, 0, None).last(), phi);
            let b = pairing(run.integrate(&noise, 1, 0, None).last(), phi);
            Ok(((a - b) * factor).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?;
    let ms = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    Ok(ms + 2.0 * (lhs * ms).sqrt())
}

/// Estimate `E⟨θ_{ε,N}(T) - θ_ε(T), φ⟩²` and compare with
/// `T ‖𝕼⁰‖ ‖θ₀‖²_∞ ‖φ‖²₂`.
pub fn theorem_bound_check(tp: &TorusProblem, n_replicas: u64, seed: u64, phi: &TorusField) -> Result<BoundCheck> {
    if n_replicas < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 replicas, got {n_replicas}")));
    }
    phi.validate()?;
    let run = Runner::new(tp, 1)?;
    let phi_hat = phi.spectrum(tp.n);
    let records = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let noise = run.noise(seed, r)?;
            let end = run.integrate(&noise, 0, 0, None);
            let last = noise.drive.t_grid.len() - 1;
            let drive = RegularizedDrive {
                epsilon: noise.drive.epsilon,
                t_grid: vec![noise.drive.t_grid[last]],
                g_values: noise.drive.g_values.iter().map(|g| vec![g[last]]).collect(),
            };
            let red = reduced_solve(tp, &drive, tp.kappa + tp.kappa_t)?;
            let half = reduced_solve(tp, &drive, tp.kappa + 0.5 * tp.kappa_t)?;
            Ok(ReplicaPairing {
                replica: r,
                pairing: pairing(end.last(), &phi_hat),
                reduced: pairing(red.last(), &phi_hat),
                reduced_half: pairing(half.last(), &phi_hat),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut full, mut half) = (ScalarMoments::default(), ScalarMoments::default());
    for r in &records {
        full.push((r.pairing - r.reduced).powi(2));
        half.push((r.pairing - r.reduced_half).powi(2));
    }
    let nf = n_replicas as f64;
    let (lhs, se) = (full.mean, (full.variance() / nf).sqrt());
    let q_norm = q_operator_norm(&tp.family);
    let sup = tp.datum.sup_norm(tp.n)?;
    let rhs = tp.t_final * q_norm * sup * sup * phi.l2_norm_sq(tp.n);
    let budget = scheme_budget(&run, seed, &phi_hat, lhs, n_replicas.min(BUDGET_REPLICAS))?;
    Ok(BoundCheck {
        scale: tp.family.scale,
        n_replicas,
        lhs,
        se,
        lhs_half: half.mean,
        se_half: (half.variance() / nf).sqrt(),
        rhs,
        q_norm,
        budget,
        pass: lhs <= rhs + 3.0 * se + budget,
        records,
    })
}

/// Distance of the empirical mean field at `T` from both candidate reduced
/// solutions of the mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanFieldCheck {
    pub n_replicas: u64,
    /// `‖mean - U(T,0)θ₀‖₂` at diffusivity `κ + κ_T`, with `U` the heat flow
    /// averaged over the drive.
    pub distance: f64,
    pub distance_half: f64,
    /// `√(Σ_m Var θ̂(m) / n)`.
    pub se: f64,
    pub q_norm_sqrt: f64,
}

/// Empirical mean of `θ_{ε,N}(T)` against the mean of the reduced solution,
/// both over the same drive replicas.
pub fn mean_field_check(tp: &TorusProblem, n_replicas: u64, seed: u64) -> Result<MeanFieldCheck> {
    if n_replicas < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 replicas, got {n_replicas}")));
    }
    let run = Runner::new(tp, 0)?;
    let nn = tp.n * tp.n;
    // per mode: (Re, Im) of θ_N, reduced at κ+κ_T, reduced at κ+κ_T/2
    let acc = crate::ensemble::run_chunked(
        0..n_replicas,
        || vec![Comoments::new(6); nn],
        |acc, r| {
            let noise = run.noise(seed, r)?;
            let end = run.integrate(&noise, 0, 0, None);
            let last = noise.drive.t_grid.len() - 1;
            let drive = RegularizedDrive {
                epsilon: noise.drive.epsilon,
                t_grid: vec![noise.drive.t_grid[last]],
                g_values: noise.drive.g_values.iter().map(|g| vec![g[last]]).collect(),
            };
            let red = reduced_solve(tp, &drive, tp.kappa + tp.kappa_t)?;
            let half = reduced_solve(tp, &drive, tp.kappa + 0.5 * tp.kappa_t)?;
            for (i, c) in acc.iter_mut().enumerate() {
                let (a, b, h) = (end.last().as_slice().unwrap()[i], red.last().as_slice().unwrap()[i], half.last().as_slice().unwrap()[i]);
                c.push(&[a.re, a.im, b.re, b.im, h.re, h.im]);
            }
            Ok(())
        },
    )?;
    let nf = n_replicas as f64;
    let (mut d, mut dh, mut var) = (0.0, 0.0, 0.0);
    for c in &acc {
        d += (c.mean[0] - c.mean[2]).powi(2) + (c.mean[1] - c.mean[3]).powi(2);
        dh += (c.mean[0] - c.mean[4]).powi(2) + (c.mean[1] - c.mean[5]).powi(2);
        // variance of the difference estimator
        var += c.linear_variance(&[1.0, 0.0, -1.0, 0.0, 0.0, 0.0]) + c.linear_variance(&[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
    }
    Ok(MeanFieldCheck {
        n_replicas,
        distance: d.sqrt(),
        distance_half: dh.sqrt(),
        se: (var / nf).sqrt(),
        q_norm_sqrt: q_operator_norm(&tp.family).sqrt(),
    })
}

/// `E‖θ_{ε,N}(T)‖²₂` with its standard error, and `‖θ₀‖²₂`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyCheck {
    pub initial: f64,
    pub mean_final: f64,
    pub se: f64,
}

pub fn energy_check(tp: &TorusProblem, n_replicas: u64, seed: u64) -> Result<EnergyCheck> {
    let run = Runner::new(tp, 0)?;
    let acc = crate::ensemble::run_chunked(
        0..n_replicas,
        ScalarMoments::default,
        |acc, r| {
            let end = run.integrate(&run.noise(seed, r)?, 0, 0, None);
            acc.push(end.last().iter().map(|z| z.norm_sqr()).sum());
            Ok(())
        },
    )?;
    Ok(EnergyCheck {
        initial: tp.datum.l2_norm_sq(tp.n),
        mean_final: acc.mean,
        se: (acc.variance() / n_replicas as f64).sqrt(),
    })
}

/// Slope of the per-step energy injected by the Itô increments against
/// `Δt ‖∇θ‖²`; the corrector removes `κ_T` times the same quantity.
pub fn ito_energy_rate(tp: &TorusProblem, n_replicas: u64, seed: u64) -> Result<f64> {
    let run = Runner::new(tp, 0)?;
    let sums = (0..n_replicas.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = [0.0f64; 2];
            for r in c * CHUNK..((c + 1) * CHUNK).min(n_replicas) {
                let mut probes = Vec::new();
                run.integrate(&run.noise(seed, r)?, 0, 0, Some(&mut probes));
                for (y, x) in probes {
                    s[0] += x * y;
                    s[1] += x * x;
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let (xy, xx) = sums.iter().fold((0.0, 0.0), |a, s| (a.0 + s[0], a.1 + s[1]));
    if xx == 0.0 {
        return Err(Error::InvalidParameter("no small-scale noise to measure".into()));
    }
    Ok(xy / xx)
}

/// Strong self-convergence in `Δt` with shared noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfConvergence {
    pub dts: Vec<f64>,
    /// RMS over replicas of `‖θ_{Δt}(T) - θ_{Δt/2}(T)‖₂`.
    pub differences: Vec<f64>,
    pub orders: Vec<f64>,
}

pub fn self_convergence(tp: &TorusProblem, n_replicas: u64, seed: u64, levels: u32) -> Result<SelfConvergence> {
    if levels < 2 {
        return Err(Error::InvalidParameter("need at least two refinements".into()));
    }
    let run = Runner::new(tp, levels)?;
    let per_rep = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let noise = run.noise(seed, r)?;
            let ends: Vec<Array2<Complex64>> = (0..=levels)
                .map(|l| run.integrate(&noise, l, 0, None).last().clone())
                .collect();
            Ok(ends.windows(2).map(|w| l2_dist_sq(&w[0], &w[1])).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let differences: Vec<f64> = (0..levels as usize)
        .map(|l| (per_rep.iter().map(|v| v[l]).sum::<f64>() / n_replicas as f64).sqrt())
        .collect();
    let orders = differences.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    Ok(SelfConvergence {
        dts: (0..levels).map(|l| tp.step() / (1u64 << l) as f64).collect(),
        differences,
        orders,
    })
}

/// Bound-check rows as CSV: `N,lhs,rhs,se,budget,lhs_half,pass`.
pub fn write_bound_table<W: Write>(checks: &[BoundCheck], w: W) -> Result<()> {
    crate::io::write_csv(
        w,
        &["N", "lhs", "rhs", "se", "budget", "lhs_half", "pass"],
        checks.iter().map(|c| {
            [c.scale as f64, c.lhs, c.rhs, c.se, c.budget, c.lhs_half, if c.pass { 1.0 } else { 0.0 }]
        }),
    )
    .map_err(crate::spectral::csv_err)
}
