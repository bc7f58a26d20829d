//! Variance functions of stationary-increment Gaussian processes.
//!
//! A process `G` with `G_0 = 0` and stationary increments is determined by
//! its variance function `γ(t) = Var(G_t)`. Every covariance used elsewhere
//! in the crate is assembled from `γ` through [`KernelSpec::cov_r`] and
//! [`KernelSpec::increment_cov`].

use crate::error::{Error, Result};
use crate::quad::{integrate, QuadOptions};
use serde::{Deserialize, Serialize};

/// Declarative description of a stationary-increment Gaussian kernel.
///
/// Construct through the checked constructors or by deserializing, both of
/// which validate parameters.
///
/// ```
/// use rdiss::kernel::KernelSpec;
/// let k = KernelSpec::fbm(0.75).unwrap();
/// assert!((k.cov_r(1.0, 2.0).unwrap() - 2f64.sqrt()).abs() < 1e-14);
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub enum KernelSpec {
    /// Brownian motion, `γ(t) = t`.
    Bm,
    /// Fractional Brownian motion, `γ(t) = t^{2H}`.
    Fbm { hurst: f64 },
    /// Exponentially damped FBM with `dγ/dt = 2α ∫₀ᵗ r^{2H-2} e^{-λr} dr`.
    DampedFbm { hurst: f64, lambda: f64, alpha: f64 },
    /// Variance function given on a grid, interpolated by monotone cubics.
    Tabulated(TabulatedGamma),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum KernelRepr {
    Bm,
    Fbm {
        hurst: f64,
    },
    DampedFbm {
        hurst: f64,
        lambda: f64,
        #[serde(default = "one")]
        alpha: f64,
    },
    Tabulated {
        grid: Vec<f64>,
        values: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl TryFrom<KernelRepr> for KernelSpec {
    type Error = Error;
    fn try_from(r: KernelRepr) -> Result<Self> {
        match r {
            KernelRepr::Bm => Ok(KernelSpec::Bm),
            KernelRepr::Fbm { hurst } => KernelSpec::fbm(hurst),
            KernelRepr::DampedFbm {
                hurst,
                lambda,
                alpha,
            } => KernelSpec::damped_fbm(hurst, lambda, alpha),
            KernelRepr::Tabulated { grid, values } => {
                TabulatedGamma::new(grid, values).map(KernelSpec::Tabulated)
            }
        }
    }
}

impl From<KernelSpec> for KernelRepr {
    fn from(k: KernelSpec) -> Self {
        match k {
            KernelSpec::Bm => KernelRepr::Bm,
            KernelSpec::Fbm { hurst } => KernelRepr::Fbm { hurst },
            KernelSpec::DampedFbm {
                hurst,
                lambda,
                alpha,
            } => KernelRepr::DampedFbm {
                hurst,
                lambda,
                alpha,
            },
            KernelSpec::Tabulated(t) => KernelRepr::Tabulated {
                grid: t.grid,
                values: t.values,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularity {
    Regular,
    Singular,
}

/// Outcome of [`KernelSpec::classify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityClass {
    pub tag: Regularity,
    pub reason: String,
}

impl RegularityClass {
    pub fn is_regular(&self) -> bool {
        self.tag == Regularity::Regular
    }
}

fn quad_opts() -> QuadOptions {
    QuadOptions {
        abs_tol: 1e-13,
        rel_tol: 1e-14,
        max_intervals: 2000,
    }
}

impl KernelSpec {
    pub fn bm() -> Self {
        KernelSpec::Bm
    }

    pub fn fbm(hurst: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "FBM requires 0 < H < 1, got H = {hurst}"
            )));
        }
        Ok(KernelSpec::Fbm { hurst })
    }

    pub fn damped_fbm(hurst: f64, lambda: f64, alpha: f64) -> Result<Self> {
        if !(hurst > 0.5 && hurst < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damped FBM requires 1/2 < H < 1, got H = {hurst}"
            )));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "damped FBM requires lambda > 0, got {lambda}"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "damped FBM requires alpha > 0, got {alpha}"
            )));
        }
        Ok(KernelSpec::DampedFbm {
            hurst,
            lambda,
            alpha,
        })
    }

    pub fn tabulated(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        TabulatedGamma::new(grid, values).map(KernelSpec::Tabulated)
    }

    /// Short human-readable label, e.g. `fbm(H=0.75)`.
    pub fn label(&self) -> String {
        match self {
            KernelSpec::Bm => "bm".into(),
            KernelSpec::Fbm { hurst } => format!("fbm(H={hurst})"),
            KernelSpec::DampedFbm {
                hurst,
                lambda,
                alpha,
            } => format!("damped_fbm(H={hurst},lambda={lambda},alpha={alpha})"),
            KernelSpec::Tabulated(t) => format!("tabulated({} points)", t.grid.len()),
        }
    }

    /// Variance `γ(t) = Var(G_t)`.
    pub fn gamma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        self.gamma_nonneg(t)
    }

    fn gamma_nonneg(&self, t: f64) -> Result<f64> {
        if t == 0.0 {
            return Ok(0.0);
        }
        match self {
            KernelSpec::Bm => Ok(t),
            KernelSpec::Fbm { hurst } => Ok(t.powf(2.0 * hurst)),
            KernelSpec::DampedFbm {
                hurst,
                lambda,
                alpha,
            } => damped_gamma(*hurst, *lambda, *alpha, t),
            KernelSpec::Tabulated(tab) => tab.value(t),
        }
    }

    /// Density of `dγ` at `t`.
    ///
    /// At `t = 0` the density is finite only for `H ≥ 1/2`; rougher kernels
    /// report [`Error::UnboundedDensity`].
    pub fn dgamma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        match self {
            KernelSpec::Bm => Ok(1.0),
            KernelSpec::Fbm { hurst } => {
                let h = *hurst;
                if t == 0.0 {
                    return match h.partial_cmp(&0.5) {
                        Some(std::cmp::Ordering::Less) => Err(Error::UnboundedDensity(format!(
                            "FBM with H = {h} < 1/2 has dγ/dt ~ t^(2H-1) → ∞ at t = 0"
                        ))),
                        Some(std::cmp::Ordering::Equal) => Ok(1.0),
                        _ => Ok(0.0),
                    };
                }
                Ok(2.0 * h * t.powf(2.0 * h - 1.0))
            }
            KernelSpec::DampedFbm {
                hurst,
                lambda,
                alpha,
            } => damped_dgamma(*hurst, *lambda, *alpha, t),
            KernelSpec::Tabulated(tab) => tab.derivative(t),
        }
    }

    /// Limit of `dγ/dt` as `t → ∞` when it exists and is finite.
    pub fn dgamma_limit(&self) -> Option<f64> {
        match self {
            KernelSpec::Bm => Some(1.0),
            KernelSpec::Fbm { hurst } if *hurst == 0.5 => Some(1.0),
            KernelSpec::Fbm { hurst } if *hurst < 0.5 => Some(0.0),
            KernelSpec::Fbm { .. } => None,
            KernelSpec::DampedFbm {
                hurst,
                lambda,
                alpha,
            } => {
                let a = 2.0 * hurst - 1.0;
                Some(2.0 * alpha * statrs::function::gamma::gamma(a) * lambda.powf(-a))
            }
            KernelSpec::Tabulated(_) => None,
        }
    }

    /// `Cov(G_t, G_s)`.
    pub fn cov_r(&self, t: f64, s: f64) -> Result<f64> {
        check_time(t)?;
        check_time(s)?;
        let gt = self.gamma_nonneg(t)?;
        let gs = self.gamma_nonneg(s)?;
        let gd = self.gamma_nonneg((t - s).abs())?;
        Ok(0.5 * (gt + gs - gd))
    }

    /// `Cov(G_b - G_a, G_d - G_c)` for `a ≤ b`, `c ≤ d`.
    pub fn increment_cov(&self, (a, b): (f64, f64), (c, d): (f64, f64)) -> Result<f64> {
        for x in [a, b, c, d] {
            check_time(x)?;
        }
        if b < a || d < c {
            return Err(Error::Domain(format!(
                "intervals must be ordered, got [{a}, {b}] and [{c}, {d}]"
            )));
        }
        self.increment_cov_unchecked(a, b, c, d)
    }

    pub(crate) fn increment_cov_unchecked(&self, a: f64, b: f64, c: f64, d: f64) -> Result<f64> {
        let g = |x: f64| self.gamma_nonneg(x.abs());
        Ok(0.5 * (g(d - a)? + g(c - b)? - g(c - a)? - g(d - b)?))
    }

    /// Regularity of the variance density on `(0, horizon]`.
    pub fn classify(&self, horizon: f64) -> RegularityClass {
        let regular = |reason: &str| RegularityClass {
            tag: Regularity::Regular,
            reason: reason.to_string(),
        };
        let singular = |reason: String| RegularityClass {
            tag: Regularity::Singular,
            reason,
        };
        match self {
            KernelSpec::Bm => regular("constant density 1"),
            KernelSpec::Fbm { hurst } if *hurst < 0.5 => singular(format!(
                "density 2H t^(2H-1) diverges at t = 0 for H = {hurst} < 1/2"
            )),
            KernelSpec::Fbm { .. } => regular("density 2H t^(2H-1) is nonnegative and bounded"),
            KernelSpec::DampedFbm { .. } => {
                regular("density is nonnegative, increasing and bounded by its plateau")
            }
            KernelSpec::Tabulated(tab) => {
                if let Some(i) = tab.values.windows(2).position(|w| w[1] < w[0]) {
                    singular(format!(
                        "tabulated values decrease between grid points {} and {}, so the density is negative",
                        i,
                        i + 1
                    ))
                } else if horizon > tab.horizon() {
                    singular(format!(
                        "tabulated grid ends at {} before the horizon {horizon}",
                        tab.horizon()
                    ))
                } else {
                    regular("monotone interpolation of nondecreasing values")
                }
            }
        }
    }

    pub fn is_singular(&self) -> bool {
        matches!(self, KernelSpec::Fbm { hurst } if *hurst < 0.5)
    }

    /// Power `m` of the clock `t = u^m` that makes `γ` smooth in `u`.
    pub(crate) fn clock_power(&self) -> u32 {
        match self {
            KernelSpec::Fbm { hurst } | KernelSpec::DampedFbm { hurst, .. } if *hurst != 0.5 => {
                (3.0 / hurst).ceil() as u32
            }
            _ => 1,
        }
    }

    /// Largest time at which the kernel can be evaluated.
    pub fn horizon(&self) -> f64 {
        match self {
            KernelSpec::Tabulated(t) => t.horizon(),
            _ => f64::INFINITY,
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    Ok(())
}

// With v = w^{1/a}, a = 2H - 1, the weight v^{a-1} dv becomes dw / a.
fn damped_gamma(h: f64, lambda: f64, alpha: f64, t: f64) -> Result<f64> {
    let a = 2.0 * h - 1.0;
    let p = 1.0 / a;
    let r = integrate(
        |w: f64| {
            let v = w.powf(p);
            (t - v) * (-lambda * v).exp()
        },
        0.0,
        t.powf(a),
        &[],
        quad_opts(),
    )?;
    Ok(2.0 * alpha / a * r.value)
}

fn damped_dgamma(h: f64, lambda: f64, alpha: f64, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let a = 2.0 * h - 1.0;
    let p = 1.0 / a;
    let upper = t.powf(a);
    // Split where the exponential has decayed so the tail is resolved.
    let knee = (1.0 / lambda).powf(a);
    let r = integrate(
        |w: f64| (-lambda * w.powf(p)).exp(),
        0.0,
        upper,
        &[knee, 4.0 * knee, 16.0 * knee],
        quad_opts(),
    )?;
    Ok(2.0 * alpha / a * r.value)
}

/// Variance function sampled on a grid starting at zero and interpolated by
/// a monotone piecewise-cubic Hermite spline.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedGamma {
    grid: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl TabulatedGamma {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != values.len() {
            return Err(Error::InvalidParameter(format!(
                "tabulated kernel needs matching grid and values with at least 2 points, got {} and {}",
                grid.len(),
                values.len()
            )));
        }
        if grid[0] != 0.0 || values[0] != 0.0 {
            return Err(Error::InvalidParameter(
                "tabulated kernel must start at t = 0 with γ(0) = 0".into(),
            ));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "tabulated grid must be strictly increasing".into(),
            ));
        }
        if values.iter().chain(&grid).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "tabulated kernel contains non-finite entries".into(),
            ));
        }
        let slopes = pchip_slopes(&grid, &values);
        Ok(Self {
            grid,
            values,
            slopes,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("grid has at least two points")
    }

    fn locate(&self, t: f64) -> Result<(usize, f64, f64)> {
        if t > self.horizon() {
            return Err(Error::Range(format!(
                "t = {t} lies beyond the tabulated grid end {}",
                self.horizon()
            )));
        }
        let i = match self.grid.partition_point(|&g| g <= t) {
            0 => 0,
            n if n >= self.grid.len() => self.grid.len() - 2,
            n => n - 1,
        };
        let h = self.grid[i + 1] - self.grid[i];
        Ok((i, h, (t - self.grid[i]) / h))
    }

    fn value(&self, t: f64) -> Result<f64> {
        let (i, h, s) = self.locate(t)?;
        let s2 = s * s;
        let s3 = s2 * s;
        Ok((2.0 * s3 - 3.0 * s2 + 1.0) * self.values[i]
            + (s3 - 2.0 * s2 + s) * h * self.slopes[i]
            + (-2.0 * s3 + 3.0 * s2) * self.values[i + 1]
            + (s3 - s2) * h * self.slopes[i + 1])
    }

    fn derivative(&self, t: f64) -> Result<f64> {
        let (i, h, s) = self.locate(t)?;
        let s2 = s * s;
        Ok((6.0 * s2 - 6.0 * s) * (self.values[i] - self.values[i + 1]) / h
            + (3.0 * s2 - 4.0 * s + 1.0) * self.slopes[i]
            + (3.0 * s2 - 2.0 * s) * self.slopes[i + 1])
    }
}

// Fritsch–Carlson slopes with the three-point one-sided endpoint rule.
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    if n == 2 {
        return vec![delta[0]; 2];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (d0, d1) = (delta[k - 1], delta[k]);
        if d0 * d1 > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / d0 + w2 / d1);
        }
    }
    let end = |h0: f64, h1: f64, m0: f64, m1: f64| {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() || m0 == 0.0 {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    };
    d[0] = end(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}
