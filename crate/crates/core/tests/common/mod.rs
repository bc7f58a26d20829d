//! Reference computations that share no code with the library.
#![allow(dead_code)]

/// Tanh-sinh quadrature on `[a, b]`; tolerates integrable endpoint
/// singularities.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let half = 0.5 * (b - a);
    let pi2 = std::f64::consts::FRAC_PI_2;
    // sum over k ≥ start in steps of `step` of w_k (f(a + d_k) + f(b - d_k))
    let tail = |h: f64, start: i64, step: i64| {
        let mut s = 0.0;
        let mut k = start;
        loop {
            let t = k as f64 * h;
            let u = pi2 * t.sinh();
            let cu = u.cosh();
            let w = pi2 * t.cosh() / (cu * cu);
            // distance from the nearer endpoint, free of cancellation
            let d = half / (u.exp() * cu);
            let (left, right) = (a + d > a, b - d < b);
            if !(w > 1e-300) || !(left || right) {
                break;
            }
            if left {
                s += w * f(a + d);
            }
            if right {
                s += w * f(b - d);
            }
            k += step;
        }
        s
    };
    let mut h = 1.0;
    let mut sum = pi2 * f(0.5 * (a + b)) + tail(h, 1, 1);
    let mut prev = sum * h * half;
    for _ in 0..12 {
        h *= 0.5;
        sum += tail(h, 1, 2);
        let cur = sum * h * half;
        if (cur - prev).abs() <= 1e-15 * cur.abs().max(1e-300) {
            return cur;
        }
        prev = cur;
    }
    prev
}

/// Lower incomplete gamma `γ(s, x)` by its power series.
pub fn lower_gamma(s: f64, x: f64) -> f64 {
    let mut term = 1.0 / s;
    let mut sum = term;
    for n in 1..400 {
        term *= x / (s + n as f64);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    x.powf(s) * (-x).exp() * sum
}

/// Damped-kernel density `2α ∫₀ᵗ v^{2H-2} e^{-λv} dv`.
pub fn damped_dgamma(h: f64, lambda: f64, alpha: f64, t: f64) -> f64 {
    let s = 2.0 * h - 1.0;
    2.0 * alpha * lambda.powf(-s) * lower_gamma(s, lambda * t)
}

/// Damped-kernel variance `2α ∫₀ᵗ (t-v) v^{2H-2} e^{-λv} dv` by quadrature.
pub fn damped_gamma(h: f64, lambda: f64, alpha: f64, t: f64) -> f64 {
    2.0 * alpha * tanh_sinh(|v| (t - v) * v.powf(2.0 * h - 2.0) * (-lambda * v).exp(), 0.0, t)
}

/// Same density by quadrature.
pub fn damped_dgamma_quad(h: f64, lambda: f64, alpha: f64, t: f64) -> f64 {
    2.0 * alpha * tanh_sinh(|v| v.powf(2.0 * h - 2.0) * (-lambda * v).exp(), 0.0, t)
}

/// `∫_c^d |u - v|^p dv`.
fn inner_power(u: f64, c: f64, d: f64, p: f64) -> f64 {
    let e = p + 1.0;
    let f = |x: f64| x.signum() * x.abs().powf(e);
    (f(u - c) - f(u - d)) / e
}

/// `Cov(B^H_b - B^H_a, B^H_d - B^H_c)` for `H > ½` as the double integral of
/// `H(2H-1)|u-v|^{2H-2}`, outer integral by quadrature split at `c` and `d`.
pub fn fbm_increment_cov_quad(h: f64, (a, b): (f64, f64), (c, d): (f64, f64)) -> f64 {
    let p = 2.0 * h - 2.0;
    let mut cuts = vec![a, b];
    cuts.extend([c, d].into_iter().filter(|&x| x > a && x < b));
    cuts.sort_by(f64::total_cmp);
    let g = |u: f64| inner_power(u, c, d, p);
    let total: f64 = cuts.windows(2).map(|w| tanh_sinh(g, w[0], w[1])).sum();
    h * (2.0 * h - 1.0) * total
}

/// `Cov(W_b - W_a, W_d - W_c) = |[a,b] ∩ [c,d]|`.
pub fn bm_increment_cov(a: f64, b: f64, c: f64, d: f64) -> f64 {
    (b.min(d) - a.max(c)).max(0.0)
}

/// `∫_a^b ∫_c^d |u - v|^p du dv`.
fn double_power(a: f64, b: f64, c: f64, d: f64, p: f64) -> f64 {
    let phi = |x: f64| x.abs().powf(p + 2.0) / ((p + 1.0) * (p + 2.0));
    -(phi(b - d) - phi(b - c) - phi(a - d) + phi(a - c))
}

/// `Cov(∫_I B^H, ∫_J B^H)` in closed form.
fn integrated_cov(h: f64, (a, b): (f64, f64), (c, d): (f64, f64)) -> f64 {
    let p = 2.0 * h;
    let mono = |lo: f64, hi: f64| (hi.powf(p + 1.0) - lo.powf(p + 1.0)) / (p + 1.0);
    0.5 * ((d - c) * mono(a, b) + (b - a) * mono(c, d) - double_power(a, b, c, d, p))
}

/// `Var(𝒢^ε_t)` for FBM with Hurst index `h`, from
/// `𝒢^ε_t = (2ε)⁻¹ (∫_ε^{t+ε} B^H - ∫_0^{(t-ε)₊} B^H)`.
pub fn regularized_variance(h: f64, epsilon: f64, t: f64) -> f64 {
    let i = (epsilon, t + epsilon);
    let j = (0.0, (t - epsilon).max(0.0));
    let v = integrated_cov(h, i, i) + integrated_cov(h, j, j) - 2.0 * integrated_cov(h, i, j);
    v / (4.0 * epsilon * epsilon)
}
