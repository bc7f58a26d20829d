//! Pathwise Fourier solution of the transport–diffusion equation with
//! constant transport directions.
//!
//! Transforms use `f̂(ξ) = ∫ e^{-2πiξ·x} f(x) dx`. Mode-level functions take
//! the angular wavevector `k = 2πξ`, in which the solution of one mode reads
//!
//! `θ̂(t, k) = θ̂₀(k) · exp(-κ|k|²t + i Σ_j (σ_j·k) 𝒢_t^j)`.
//!
//! The noise factor is unimodular, so `|θ̂(t,k)| = |θ̂₀(k)| e^{-κ|k|²t}` on
//! every replica.

use crate::error::{Error, Result};
use crate::fft2::Fft2;
use crate::io::write_csv;
use crate::sampler::RegularizedDrive;
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

pub type Vec2 = [f64; 2];

pub(crate) fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn norm2(a: Vec2) -> f64 {
    dot(a, a)
}

/// `A · exp(-π|x - c|²/a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBump {
    #[serde(default = "unit")]
    pub amplitude: f64,
    #[serde(default = "unit")]
    pub width: f64,
    #[serde(default)]
    pub center: Vec2,
}

fn unit() -> f64 {
    1.0
}

/// Real initial datum built from isotropic Gaussian bumps, whose transforms
/// are known exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InitialDatum {
    pub bumps: Vec<GaussianBump>,
}

impl InitialDatum {
    /// A single centered bump `exp(-π|x|²/a)`.
    pub fn gaussian(a: f64) -> Self {
        Self {
            bumps: vec![GaussianBump {
                amplitude: 1.0,
                width: a,
                center: [0.0, 0.0],
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bumps.is_empty() {
            return Err(Error::InvalidParameter("initial datum has no bumps".into()));
        }
        for b in &self.bumps {
            if !(b.width > 0.0 && b.width.is_finite() && b.amplitude.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "bump width must be positive and amplitude finite, got {b:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: Vec2) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let d = [x[0] - b.center[0], x[1] - b.center[1]];
                b.amplitude * (-PI * norm2(d) / b.width).exp()
            })
            .sum()
    }

    pub fn gradient(&self, x: Vec2) -> Vec2 {
        self.bumps.iter().fold([0.0, 0.0], |acc, b| {
            let d = [x[0] - b.center[0], x[1] - b.center[1]];
            let f = b.amplitude * (-PI * norm2(d) / b.width).exp() * (-2.0 * PI / b.width);
            [acc[0] + f * d[0], acc[1] + f * d[1]]
        })
    }

    /// `θ̂₀` at angular wavevector `k`.
    pub fn transform(&self, k: Vec2) -> Complex64 {
        self.bumps
            .iter()
            .map(|b| {
                let mag = b.amplitude * b.width * (-b.width * norm2(k) / (4.0 * PI)).exp();
                Complex64::from_polar(mag, -dot(k, b.center))
            })
            .sum()
    }

    /// `∫ θ₀² dx`.
    pub fn l2_norm_sq(&self) -> f64 {
        let mut acc = 0.0;
        for p in &self.bumps {
            for q in &self.bumps {
                let s = p.width * q.width / (p.width + q.width);
                let d = [p.center[0] - q.center[0], p.center[1] - q.center[1]];
                acc += p.amplitude * q.amplitude * s * (-PI * norm2(d) / (p.width + q.width)).exp();
            }
        }
        acc
    }
}

impl Default for InitialDatum {
    fn default() -> Self {
        Self::gaussian(1.0)
    }
}

/// Uniform frequency lattice `ξ = m·dξ`, `m ∈ [-n/2, n/2)` in each axis.
///
/// Its dual spatial grid is `x = j·dx`, `dx = 1/(n dξ)`, covering one period
/// `[-L, L)` with `L = 1/(2dξ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lattice {
    pub n: usize,
    pub dxi: f64,
}

impl Lattice {
    /// Lattice covering `[-xi_max, xi_max)` with spacing `dxi`.
    pub fn new(xi_max: f64, dxi: f64) -> Result<Self> {
        if !(xi_max > 0.0 && dxi > 0.0 && dxi < xi_max) {
            return Err(Error::InvalidParameter(format!(
                "lattice needs 0 < dxi < xi_max, got dxi = {dxi}, xi_max = {xi_max}"
            )));
        }
        let n = (2.0 * xi_max / dxi).round() as usize;
        if n % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "2·xi_max/dxi = {n} must be an even integer"
            )));
        }
        Ok(Self { n, dxi })
    }

    pub fn xi_max(&self) -> f64 {
        0.5 * self.n as f64 * self.dxi
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.n as f64 * self.dxi)
    }

    pub fn half_width(&self) -> f64 {
        0.5 / self.dxi
    }

    /// Signed lattice index of array position `i`.
    pub fn index(&self, i: usize) -> i64 {
        i as i64 - (self.n / 2) as i64
    }

    /// Angular wavevector at array position `(i, j)`.
    pub fn wavevector(&self, i: usize, j: usize) -> Vec2 {
        let s = 2.0 * PI * self.dxi;
        [s * self.index(i) as f64, s * self.index(j) as f64]
    }

    /// Spatial coordinate at array position `j`.
    pub fn coord(&self, j: usize) -> f64 {
        self.index(j) as f64 * self.dx()
    }

    pub fn point(&self, i: usize, j: usize) -> Vec2 {
        [self.coord(i), self.coord(j)]
    }

    /// Tabulate `f(k)` over the lattice.
    pub fn spectrum(&self, mut f: impl FnMut(Vec2) -> Complex64) -> Array2<Complex64> {
        Array2::from_shape_fn((self.n, self.n), |(i, j)| f(self.wavevector(i, j)))
    }
}

impl Default for Lattice {
    fn default() -> Self {
        Self { n: 256, dxi: 1.0 / 16.0 }
    }
}

/// Statement of the constant-coefficient problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralProblem {
    pub kappa: f64,
    pub sigmas: Vec<Vec2>,
    pub datum: InitialDatum,
    pub lattice: Lattice,
}

impl SpectralProblem {
    pub fn new(kappa: f64, sigmas: Vec<Vec2>, datum: InitialDatum, lattice: Lattice) -> Result<Self> {
        let p = Self {
            kappa,
            sigmas,
            datum,
            lattice,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kappa must be nonnegative, got {}",
                self.kappa
            )));
        }
        if self.sigmas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sigma entries must be finite".into()));
        }
        self.datum.validate()
    }

    pub fn theta0_hat(&self, k: Vec2) -> Complex64 {
        self.datum.transform(k)
    }

    /// `σ²(k) = Σ_j (σ_j·k)²`.
    pub fn sigma2(&self, k: Vec2) -> f64 {
        self.sigmas.iter().map(|s| dot(*s, k).powi(2)).sum()
    }

    /// `ρ(k, q) = Σ_j (σ_j·k)(σ_j·q)`.
    pub fn rho(&self, k: Vec2, q: Vec2) -> f64 {
        self.sigmas.iter().map(|s| dot(*s, k) * dot(*s, q)).sum()
    }

    /// Shift vector `Σ_j σ_j 𝒢_t^j` at grid index `i`.
    pub fn shift(&self, drive: &RegularizedDrive, i: usize) -> Vec2 {
        self.sigmas
            .iter()
            .zip(&drive.g_values)
            .fold([0.0, 0.0], |acc, (s, g)| [acc[0] + s[0] * g[i], acc[1] + s[1] * g[i]])
    }

    fn check_drive(&self, drive: &RegularizedDrive) -> Result<()> {
        if drive.n_components() != self.sigmas.len() {
            return Err(Error::GridMismatch(format!(
                "drive has {} components but the problem has {} transport directions",
                drive.n_components(),
                self.sigmas.len()
            )));
        }
        Ok(())
    }

    /// Whole-lattice spectrum of one replica at drive grid index `i`.
    pub fn solve_field(&self, drive: &RegularizedDrive, i: usize) -> Result<Array2<Complex64>> {
        self.check_drive(drive)?;
        let t = *drive.t_grid.get(i).ok_or_else(|| {
            Error::GridMismatch(format!("time index {i} outside the drive grid"))
        })?;
        Ok(self.shifted_spectrum(t, self.shift(drive, i)))
    }

    /// `θ̂₀(k) e^{-κ|k|²t} e^{ik·s}` over the lattice.
    pub fn shifted_spectrum(&self, t: f64, s: Vec2) -> Array2<Complex64> {
        let kappa = self.kappa;
        self.lattice.spectrum(|k| {
            self.theta0_hat(k) * Complex64::from_polar((-kappa * norm2(k) * t).exp(), dot(k, s))
        })
    }
}

/// One replica's values of a single Fourier mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeTrajectory {
    pub k: Vec2,
    pub times: Vec<f64>,
    pub values: Vec<Complex64>,
}

/// Solve mode `k` on the drive's time grid.
pub fn solve_mode(p: &SpectralProblem, drive: &RegularizedDrive, k: Vec2) -> Result<ModeTrajectory> {
    p.check_drive(drive)?;
    let c0 = p.theta0_hat(k);
    let k2 = norm2(k);
    let values = drive
        .t_grid
        .iter()
        .enumerate()
        .map(|(i, &t)| c0 * Complex64::from_polar((-p.kappa * k2 * t).exp(), dot(k, p.shift(drive, i))))
        .collect();
    Ok(ModeTrajectory {
        k,
        times: drive.t_grid.clone(),
        values,
    })
}

/// Max over the grid of the integrated-equation residual
/// `|θ̂(t) - θ̂(0) + κ|k|²∫θ̂ ds - i Σ(σ_j·k)∫θ̂ d𝒢^j|`, trapezoid in time.
pub fn verify_ode_residual(
    traj: &ModeTrajectory,
    p: &SpectralProblem,
    drive: &RegularizedDrive,
) -> Result<f64> {
    p.check_drive(drive)?;
    if traj.times != drive.t_grid {
        return Err(Error::GridMismatch(
            "trajectory and drive use different time grids".into(),
        ));
    }
    let k2 = norm2(traj.k);
    let proj: Vec<f64> = p.sigmas.iter().map(|s| dot(*s, traj.k)).collect();
    let v = &traj.values;
    let (mut int_dt, mut int_dg) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    let mut worst: f64 = 0.0;
    for i in 1..v.len() {
        let avg = 0.5 * (v[i] + v[i - 1]);
        int_dt += avg * (traj.times[i] - traj.times[i - 1]);
        let dg: f64 = proj
            .iter()
            .zip(&drive.g_values)
            .map(|(a, g)| a * (g[i] - g[i - 1]))
            .sum();
        int_dg += avg * dg;
        let r = v[i] - v[0] + p.kappa * k2 * int_dt - Complex64::i() * int_dg;
        worst = worst.max(r.norm());
    }
    Ok(worst)
}

/// Real field on the spatial grid dual to a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalField {
    pub lattice: Lattice,
    /// `values[[i, j]]` is the value at `lattice.point(i, j)`.
    pub values: Array2<f64>,
}

impl PhysicalField {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(∫ f² dx)^{1/2}` by the grid rule.
    pub fn l2_norm(&self) -> f64 {
        let dx = self.lattice.dx();
        (self.values.iter().map(|v| v * v).sum::<f64>() * dx * dx).sqrt()
    }

    /// Columns `x, y, value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let n = self.lattice.n;
        let rows = (0..n * n).map(|idx| {
            let (i, j) = (idx / n, idx % n);
            [self.lattice.coord(i), self.lattice.coord(j), self.values[[i, j]]]
        });
        write_csv(w, &["x", "y", "value"], rows).map_err(csv_err)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidParameter(format!("csv write failed: {e}"))
}

/// Columns `xi1, xi2, re, im` (ordinary frequencies `ξ = k/2π`).
pub fn write_mode_table<W: Write>(lattice: &Lattice, spectrum: &Array2<Complex64>, w: W) -> Result<()> {
    let n = lattice.n;
    let rows = (0..n * n).map(|idx| {
        let (i, j) = (idx / n, idx % n);
        let c = spectrum[[i, j]];
        [
            lattice.index(i) as f64 * lattice.dxi,
            lattice.index(j) as f64 * lattice.dxi,
            c.re,
            c.im,
        ]
    });
    write_csv(w, &["xi1", "xi2", "re", "im"], rows).map_err(csv_err)
}

/// File name for the snapshot of `run_id` at time index `t_index`.
pub fn snapshot_name(run_id: &str, t_index: usize) -> String {
    format!("{run_id}_{t_index}.csv")
}

/// Reusable inverse transform from lattice spectra to physical fields.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    lattice: Lattice,
    fft: Fft2,
}

impl Reconstructor {
    pub fn new(lattice: Lattice) -> Self {
        Self {
            lattice,
            fft: Fft2::new(lattice.n),
        }
    }

    /// Complex field `dξ² Σ_m e^{2πiξ_m·x} f̂_m` without the realness check.
    pub fn complex(&self, spectrum: &Array2<Complex64>) -> Result<Vec<Complex64>> {
        let n = self.lattice.n;
        if spectrum.dim() != (n, n) {
            return Err(Error::GridMismatch(format!(
                "spectrum shape {:?} does not match lattice size {n}",
                spectrum.dim()
            )));
        }
        // Index shifts by n/2 turn into alternating signs on both sides.
        let mut buf: Vec<Complex64> = spectrum
            .indexed_iter()
            .map(|((i, j), c)| if (i + j) % 2 == 0 { *c } else { -*c })
            .collect();
        self.fft.inverse(&mut buf);
        let w = self.lattice.dxi * self.lattice.dxi;
        for (idx, c) in buf.iter_mut().enumerate() {
            let s = if (idx / n + idx % n) % 2 == 0 { w } else { -w };
            *c *= s;
        }
        Ok(buf)
    }

    pub fn apply(&self, spectrum: &Array2<Complex64>) -> Result<PhysicalField> {
        let buf = self.complex(spectrum)?;
        let scale = buf.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
        let residue = buf.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
        let tolerance = 1e-9 * scale.max(1.0);
        if residue > tolerance {
            return Err(Error::ConjugateSymmetry { residue, tolerance });
        }
        let n = self.lattice.n;
        Ok(PhysicalField {
            lattice: self.lattice,
            values: Array2::from_shape_vec((n, n), buf.into_iter().map(|c| c.re).collect())
                .expect("n × n buffer"),
        })
    }

    /// Forward transform `f̂(ξ_m) ≈ dx² Σ_j e^{-2πiξ_m·x_j} f(x_j)`.
    pub fn forward(&self, field: &Array2<f64>) -> Array2<Complex64> {
        let n = self.lattice.n;
        let mut buf: Vec<Complex64> = field
            .indexed_iter()
            .map(|((i, j), v)| {
                let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                Complex64::new(s * v, 0.0)
            })
            .collect();
        self.fft.forward(&mut buf);
        let dx = self.lattice.dx();
        Array2::from_shape_fn((n, n), |(i, j)| {
            let s = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            buf[i * n + j] * (s * dx * dx)
        })
    }
}

/// Inverse-transform a lattice spectrum to a real field.
pub fn reconstruct(spectrum: &Array2<Complex64>, lattice: &Lattice) -> Result<PhysicalField> {
    Reconstructor::new(*lattice).apply(spectrum)
}
