//! The trace density `V̇_ε`, its running integral `V_ε`, and the weak-star
//! convergence diagnostic `dV_ε → ½ dγ`.
//!
//! `V̇_ε(t) = (2ε)⁻² ∫₀ᵗ ⟨1_{[(t-ε)₊, t+ε]}, 1_{[(s-ε)₊, s+ε]}⟩ ds`, where the
//! inner product is the increment covariance of the kernel.
//!
//! ```
//! use rdiss::{kernel::KernelSpec, veps::veps_dot};
//! let v = veps_dot(&KernelSpec::bm(), 0.05, 0.5).unwrap();
//! assert!((v - 0.5).abs() < 1e-10);
//! ```

use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::kernel::KernelSpec;
use crate::quad::{integrate, QuadOptions};
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;

fn check_eps(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

/// Density `V̇_ε(t)`.
pub fn veps_dot(k: &KernelSpec, epsilon: f64, t: f64) -> Result<f64> {
    check_eps(epsilon)?;
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let norm = 4.0 * epsilon * epsilon;
    let (a, b) = ((t - epsilon).max(0.0), t + epsilon);
    let failure = std::cell::Cell::new(None);
    let r = integrate(
        |s: f64| {
            let (c, d) = ((s - epsilon).max(0.0), s + epsilon);
            k.increment_cov_unchecked(a, b, c, d).unwrap_or_else(|e| {
                failure.set(Some(e));
                0.0
            })
        },
        0.0,
        t,
        &[epsilon, t - 2.0 * epsilon],
        QuadOptions {
            abs_tol: 1e-13 * norm,
            rel_tol: 1e-14,
            max_intervals: 4000,
        },
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(r?.value / norm)
}

/// `V̇_ε` and `V_ε` sampled on a time grid.
#[derive(Debug, Clone, Serialize)]
pub struct VepsCurve {
    pub epsilon: f64,
    pub kernel: KernelSpec,
    pub t_grid: Vec<f64>,
    pub vdot: Vec<f64>,
    pub v: Vec<f64>,
}

/// Tabulate `V̇_ε` and `V_ε = ∫₀ᵗ V̇_ε` on `t_grid` (increasing, from 0).
///
/// Each grid interval is integrated by adaptive Gauss–Kronrod with the
/// kinks of `V̇_ε` at `ε, 2ε, 3ε` as breakpoints.
pub fn veps_cumulative(k: &KernelSpec, epsilon: f64, t_grid: &[f64]) -> Result<VepsCurve> {
    check_eps(epsilon)?;
    if t_grid.first() != Some(&0.0) {
        return Err(Error::InvalidParameter("time grid must start at 0".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "time grid must be strictly increasing".into(),
        ));
    }
    let vdot = t_grid
        .par_iter()
        .map(|&t| veps_dot(k, epsilon, t))
        .collect::<Result<Vec<_>>>()?;
    let kinks = [epsilon, 2.0 * epsilon, 3.0 * epsilon];
    let pieces = t_grid
        .par_windows(2)
        .map(|w| {
            let failure = std::cell::Cell::new(None);
            let r = integrate(
                |t| {
                    veps_dot(k, epsilon, t).unwrap_or_else(|e| {
                        failure.set(Some(e));
                        0.0
                    })
                },
                w[0],
                w[1],
                &kinks,
                QuadOptions {
                    abs_tol: 1e-13,
                    rel_tol: 1e-13,
                    max_intervals: 200,
                },
            );
            match failure.into_inner() {
                Some(e) => Err(e),
                None => Ok(r?.value),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut v = Vec::with_capacity(t_grid.len());
    v.push(0.0);
    let mut acc = 0.0;
    for p in pieces {
        acc += p;
        v.push(acc);
    }
    Ok(VepsCurve {
        epsilon,
        kernel: k.clone(),
        t_grid: t_grid.to_vec(),
        vdot,
        v,
    })
}

impl VepsCurve {
    /// `½γ(t)` on the grid, the limit of `V_ε`.
    pub fn gamma_half(&self) -> Result<Vec<f64>> {
        self.t_grid
            .iter()
            .map(|&t| Ok(0.5 * self.kernel.gamma(t)?))
            .collect()
    }

    /// `sup |V_ε(t) - ½γ(t)|` over grid points in `[lo, hi]`.
    pub fn sup_deviation(&self, lo: f64, hi: f64) -> Result<f64> {
        let half = self.gamma_half()?;
        Ok(self
            .t_grid
            .iter()
            .zip(self.v.iter().zip(&half))
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(_, (v, g))| (v - g).abs())
            .fold(0.0, f64::max))
    }

    /// `|∫φ dV_ε - ½∫φ dγ|` by a Stieltjes trapezoid sum on the grid.
    pub fn weak_star_residual(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.t_grid.len() {
            return Err(Error::GridMismatch(format!(
                "test function has {} samples, grid has {}",
                phi.len(),
                self.t_grid.len()
            )));
        }
        let half = self.gamma_half()?;
        let mut acc = 0.0;
        for i in 0..phi.len() - 1 {
            let dv = self.v[i + 1] - self.v[i];
            let dg = half[i + 1] - half[i];
            acc += 0.5 * (phi[i] + phi[i + 1]) * (dv - dg);
        }
        Ok(acc.abs())
    }

    /// Columns `t, vdot, v, gamma_half, residual, gamma, residual_full`;
    /// the last two compare against the unhalved normalization.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let half = self.gamma_half()?;
        let rows = (0..self.t_grid.len()).map(|i| {
            [
                self.t_grid[i],
                self.vdot[i],
                self.v[i],
                half[i],
                self.v[i] - half[i],
                2.0 * half[i],
                self.v[i] - 2.0 * half[i],
            ]
        });
        write_csv(
            w,
            &["t", "vdot", "v", "gamma_half", "residual", "gamma", "residual_full"],
            rows,
        )
        .map_err(|e| Error::InvalidParameter(format!("csv write failed: {e}")))
    }
}

/// Weak-star residual of `phi` for the curve on `t_grid`.
pub fn weak_star_residual(
    k: &KernelSpec,
    epsilon: f64,
    t_grid: &[f64],
    phi: impl Fn(f64) -> f64,
) -> Result<f64> {
    let curve = veps_cumulative(k, epsilon, t_grid)?;
    let samples: Vec<f64> = t_grid.iter().map(|&t| phi(t)).collect();
    curve.weak_star_residual(&samples)
}

/// Uniform grid `0, τ/n, …, τ`.
pub fn uniform_grid(tau: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| tau * i as f64 / n as f64).collect()
}
