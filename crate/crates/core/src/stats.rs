//! One-pass mergeable moment accumulators.

use serde::Serialize;

/// Accumulators that combine partial results.
pub trait Merge {
    fn merge(&mut self, other: &Self);
}

/// Mean and co-moment matrix of a `d`-dimensional real sample
/// (Welford updates, Chan et al. merges).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comoments {
    pub n: u64,
    pub mean: Vec<f64>,
    /// Row-major `d × d` sums of products of deviations.
    pub cm: Vec<f64>,
}

impl Comoments {
    pub fn new(d: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; d],
            cm: vec![0.0; d * d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * inv;
        }
        let w = 1.0 - inv;
        for i in 0..d {
            for j in 0..d {
                self.cm[i * d + j] += delta[i] * delta[j] * w;
            }
        }
    }

    /// Unbiased covariance entry.
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        self.cm[i * self.dim() + j] / (self.n - 1) as f64
    }

    /// Unbiased variance of `Σ_i w_i x_i`.
    pub fn linear_variance(&self, w: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                acc += w[i] * w[j] * self.cm[i * d + j];
            }
        }
        if self.n < 2 {
            f64::NAN
        } else {
            acc / (self.n - 1) as f64
        }
    }
}

impl Merge for Comoments {
    fn merge(&mut self, o: &Self) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = o.clone();
            return;
        }
        let d = self.dim();
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = o.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            self.mean[i] += delta[i] * nb / n;
            for j in 0..d {
                self.cm[i * d + j] += o.cm[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        self.n += o.n;
    }
}

/// Central moments up to order four of a scalar sample (Pébay updates).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ScalarMoments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl ScalarMoments {
    pub fn push(&mut self, x: f64) {
        let mut one = ScalarMoments {
            n: 1,
            mean: x,
            ..Default::default()
        };
        std::mem::swap(self, &mut one);
        self.merge(&one);
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the sample variance,
    /// `√((μ₄ - σ⁴ (n-3)/(n-1)) / n)`.
    pub fn variance_se(&self) -> f64 {
        if self.n < 4 {
            return f64::NAN;
        }
        let n = self.n as f64;
        let mu4 = self.m4 / n;
        let s2 = self.m2 / n;
        ((mu4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
    }
}

impl Merge for ScalarMoments {
    fn merge(&mut self, o: &Self) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let d = o.mean - self.mean;
        let (d2, d3, d4) = (d * d, d * d * d, d * d * d * d);
        let m4 = self.m4
            + o.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * o.m3 - nb * self.m3) / n;
        let m3 = self.m3
            + o.m3
            + d3 * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * o.m2 - nb * self.m2) / n;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        self.mean += d * nb / n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
        self.n += o.n;
    }
}

impl<T: Merge> Merge for Vec<T> {
    fn merge(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}
