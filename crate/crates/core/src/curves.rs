//! The recovery-curve family.
//!
//! A recovery shape is `g(t) = (1 - A) * (1 - B * exp(-t / C))` for `t > 0`:
//! `1 - A` is the asymptote, `(1 - A)(1 - B)` the value just after the event
//! and `C` the recovery time constant in months. A recovery curve scales the
//! shape by the pre-event level `S` and takes the value `S` at `t = 0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("invalid shape parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("time must be {expected}, got {t}")]
    Domain { t: f64, expected: &'static str },
    #[error("curve fit failed: {0}")]
    Fit(String),
}

/// `(A, B, C)`: asymptotic drop, extra initial drop, recovery time constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryShape {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl RecoveryShape {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self, CurveError> {
        if !(0.0..=1.0).contains(&a) {
            return Err(CurveError::InvalidParameter { name: "A", value: a });
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(CurveError::InvalidParameter { name: "B", value: b });
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(CurveError::InvalidParameter { name: "C", value: c });
        }
        Ok(Self { a, b, c })
    }

    /// Scaled value at `t > 0` months.
    pub fn eval(&self, t: f64) -> Result<f64, CurveError> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CurveError::Domain { t, expected: "finite and > 0" });
        }
        Ok(self.eval_unchecked(t))
    }

    #[inline]
    pub fn eval_unchecked(&self, t: f64) -> f64 {
        shape_value(self.a, self.b, self.c, t)
    }

    pub fn asymptote(&self) -> f64 {
        1.0 - self.a
    }

    pub fn value_at_zero_plus(&self) -> f64 {
        (1.0 - self.a) * (1.0 - self.b)
    }
}

#[inline]
pub(crate) fn shape_value(a: f64, b: f64, c: f64, t: f64) -> f64 {
    (1.0 - a) * (1.0 - b * (-t / c).exp())
}

/// A recovery shape anchored at a pre-event level `S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCurve {
    pub s: f64,
    pub shape: RecoveryShape,
}

impl RecoveryCurve {
    pub fn new(s: f64, shape: RecoveryShape) -> Result<Self, CurveError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(CurveError::InvalidParameter { name: "S", value: s });
        }
        Ok(Self { s, shape })
    }

    /// Function value at `t >= 0`; exactly `S` at the event time.
    pub fn eval(&self, t: f64) -> Result<f64, CurveError> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(CurveError::Domain { t, expected: "finite and >= 0" });
        }
        if t == 0.0 {
            return Ok(self.s);
        }
        Ok(self.s * self.shape.eval_unchecked(t))
    }
}

/// Lower bound on `C` searched by [`fit_shape`].
pub const FIT_C_MIN: f64 = 1e-2;
/// Upper bound on `C`; beyond it `B * exp(-t / C)` is a flat ridge.
pub const FIT_C_MAX: f64 = 1e4;
/// Seeding range for the multi-start search over `C`.
pub const FIT_C_SEED_RANGE: (f64, f64) = (0.5, 96.0);

/// Result of a least-squares shape fit.
///
/// With an unconstrained asymptote `a` may be negative, so this is not
/// necessarily a valid [`RecoveryShape`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Sum of squared residuals.
    pub residual: f64,
}

impl ShapeFit {
    pub fn eval(&self, t: f64) -> f64 {
        shape_value(self.a, self.b, self.c, t)
    }

    pub fn to_shape(&self) -> Result<RecoveryShape, CurveError> {
        RecoveryShape::new(self.a, self.b, self.c)
    }
}

/// Least-squares fit of `(A, B, C)` to `(t, value)` points.
///
/// `g(t) = u - w * exp(-t / C)` with `u = 1 - A` and `w = (1 - A) B` is linear
/// in `(u, w)` for fixed `C`, so the inner problem is a two-variable convex QP
/// solved exactly over its feasible polygon (`0 <= w <= u`, plus `u <= 1` when
/// the asymptote is constrained). The outer search over `log C` scans a
/// log-spaced grid and polishes the best local minima with golden-section
/// search.
///
/// When `B` is unidentified (`w = 0` or `u = 0`), `B = 0` and `C` is the
/// geometric midpoint of [`FIT_C_SEED_RANGE`].
pub fn fit_shape(points: &[(f64, f64)], constrain_asymptote: bool) -> Result<ShapeFit, CurveError> {
    if points.len() < 3 {
        return Err(CurveError::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    for &(t, v) in points {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CurveError::Fit(format!("time {t} must be finite and > 0")));
        }
        if !v.is_finite() {
            return Err(CurveError::Fit(format!("non-finite value {v}")));
        }
    }
    let t0 = points[0].0;
    if points.iter().all(|&(t, _)| t == t0) {
        return Err(CurveError::Fit("all time points are equal".into()));
    }

    let u_max = if constrain_asymptote { 1.0 } else { f64::INFINITY };
    let profile = |log_c: f64| inner_fit(points, log_c.exp(), u_max);

    const GRID: usize = 121;
    let (lo, hi) = (FIT_C_MIN.ln(), FIT_C_MAX.ln());
    let step = (hi - lo) / (GRID - 1) as f64;
    let grid: Vec<(f64, f64)> = (0..GRID)
        .map(|i| {
            let lc = lo + step * i as f64;
            (lc, profile(lc).sse)
        })
        .collect();

    // Polish every grid local minimum; keep the best.
    let mut best: Option<(f64, InnerFit)> = None;
    for i in 0..GRID {
        let left = if i == 0 { f64::INFINITY } else { grid[i - 1].1 };
        let right = if i + 1 == GRID { f64::INFINITY } else { grid[i + 1].1 };
        if grid[i].1 > left || grid[i].1 > right {
            continue;
        }
        let a = (grid[i].0 - step).max(lo);
        let b = (grid[i].0 + step).min(hi);
        let lc = golden_min(|x| profile(x).sse, a, b, 1e-12);
        let cand = [(lc, profile(lc)), (grid[i].0, profile(grid[i].0))];
        for (lc, fit) in cand {
            let better = match &best {
                None => true,
                Some((_, cur)) => fit.sse < cur.sse,
            };
            if better {
                best = Some((lc, fit));
            }
        }
    }
    let (log_c, fit) = best.expect("grid is non-empty");

    let unidentified = fit.w <= 0.0 || fit.u <= 0.0;
    let (a, b, c) = if unidentified {
        let mid = (FIT_C_SEED_RANGE.0 * FIT_C_SEED_RANGE.1).sqrt();
        (1.0 - fit.u, 0.0, mid)
    } else {
        (1.0 - fit.u, (fit.w / fit.u).clamp(0.0, 1.0), log_c.exp())
    };
    let residual = points
        .iter()
        .map(|&(t, v)| {
            let r = v - shape_value(a, b, c, t);
            r * r
        })
        .sum();
    Ok(ShapeFit { a, b, c, residual })
}

#[derive(Debug, Clone, Copy)]
struct InnerFit {
    u: f64,
    w: f64,
    sse: f64,
}

/// Exact minimiser of `sum (v - u + w e_j)^2` over `0 <= w <= u <= u_max`.
fn inner_fit(points: &[(f64, f64)], c: f64, u_max: f64) -> InnerFit {
    let n = points.len() as f64;
    let (mut se, mut see, mut sy, mut sey) = (0.0, 0.0, 0.0, 0.0);
    for &(t, v) in points {
        let e = (-t / c).exp();
        se += e;
        see += e * e;
        sy += v;
        sey += e * v;
    }
    let sse = |u: f64, w: f64| -> f64 {
        points
            .iter()
            .map(|&(t, v)| {
                let r = v - u + w * (-t / c).exp();
                r * r
            })
            .sum()
    };
    let feasible = |u: f64, w: f64| w >= 0.0 && w <= u && u <= u_max;

    let mut cands: Vec<(f64, f64)> = Vec::with_capacity(8);
    // Interior: normal equations for columns [1, -e].
    let det = n * see - se * se;
    if det > 1e-12 * n * see.max(1e-300) {
        let u = (see * sy - se * sey) / det;
        let w = (se * sy - n * sey) / det;
        cands.push((u, w));
    }
    // Face w = 0.
    cands.push(((sy / n).clamp(0.0, u_max), 0.0));
    // Face w = u: g = u (1 - e).
    let s11 = n - 2.0 * se + see;
    if s11 > 0.0 {
        let u = ((sy - sey) / s11).clamp(0.0, u_max);
        cands.push((u, u));
    }
    // Face u = u_max (finite only): g = 1 - w e.
    if u_max.is_finite() {
        let w = if see > 0.0 { ((u_max * se - sey) / see).clamp(0.0, u_max) } else { 0.0 };
        cands.push((u_max, w));
        cands.push((u_max, 0.0));
        cands.push((u_max, u_max));
    }
    cands.push((0.0, 0.0));

    let mut best = InnerFit { u: 0.0, w: 0.0, sse: f64::INFINITY };
    for (u, w) in cands {
        if !feasible(u, w) {
            continue;
        }
        let s = sse(u, w);
        // Strict improvement only, so earlier candidates (smaller w) win ties.
        if s < best.sse - 1e-15 * best.sse.abs().max(1e-300) || best.sse.is_infinite() {
            best = InnerFit { u, w, sse: s };
        }
    }
    best
}

pub(crate) fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= tol * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}
