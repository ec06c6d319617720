#![allow(dead_code)]

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, tol, 60)
}

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Splits `[a, b]` into `pieces` equal parts before integrating, so narrow
/// peaks are not missed by the first coarse estimate.
pub fn integrate_pieces(f: &dyn Fn(f64) -> f64, a: f64, b: f64, pieces: usize, tol: f64) -> f64 {
    let h = (b - a) / pieces as f64;
    (0..pieces).map(|i| integrate(f, a + i as f64 * h, a + (i + 1) as f64 * h, tol / pieces as f64)).sum()
}

/// Number of local maxima of a sampled curve, endpoints included. Plateaus
/// count once.
pub fn local_maxima(v: &[f64]) -> usize {
    let mut compressed: Vec<f64> = Vec::with_capacity(v.len());
    for &x in v {
        if compressed.last() != Some(&x) {
            compressed.push(x);
        }
    }
    let n = compressed.len();
    if n == 1 {
        return 1;
    }
    (0..n)
        .filter(|&i| {
            let left = i == 0 || compressed[i - 1] < compressed[i];
            let right = i == n - 1 || compressed[i + 1] < compressed[i];
            left && right
        })
        .count()
}

/// Upper end of a gamma-like density's effective support: doubles past the
/// mode until the log density is 60 below its peak.
pub fn effective_upper(ln_pdf: &dyn Fn(f64) -> f64, mode: f64) -> f64 {
    let peak = ln_pdf(mode.max(1e-12));
    let mut hi = mode.max(1e-3) * 2.0;
    while ln_pdf(hi) > peak - 60.0 {
        hi *= 2.0;
    }
    hi
}

/// Golden-section argmax of a unimodal function on `[a, b]`.
pub fn argmax(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
