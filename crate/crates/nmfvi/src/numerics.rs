//! Shared numerical kernels: Gauss-Hermite rules, adaptive Gauss-Kronrod
//! quadrature, standard-normal helpers, and 1-D root/extremum searches.
//!
//! Everything here is deterministic: fixed node tables, fixed iteration
//! orders, no randomness.

use nalgebra::DMatrix;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

/// Gauss-Hermite rule of degree `n`, normalized for expectations against the
/// standard normal law: `E[f(Z)] ≈ Σ w_i f(z_i)` with `Σ w_i = 1`.
///
/// Nodes and weights come from the Golub-Welsch algorithm: eigenvalues of the
/// symmetric tridiagonal Jacobi matrix with off-diagonal `sqrt(k/2)`, weights
/// from the squared first eigenvector components.
pub fn gauss_hermite_normal(n: usize) -> Vec<(f64, f64)> {
    assert!(n >= 1, "need at least one Hermite node");
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 0..n - 1 {
        let off = ((k as f64 + 1.0) * 0.5).sqrt();
        jacobi[(k, k + 1)] = off;
        jacobi[(k + 1, k)] = off;
    }
    let eigen = jacobi.symmetric_eigen();
    let mut rule: Vec<(f64, f64)> = eigen
        .eigenvalues
        .iter()
        .zip(eigen.eigenvectors.row(0).iter())
        .map(|(&x, &v0)| (std::f64::consts::SQRT_2 * x, v0 * v0))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    // The physicists' weights sum to sqrt(pi); the v0^2 normalization already
    // divides that out, so renormalize only the residual rounding.
    let total: f64 = rule.iter().map(|&(_, w)| w).sum();
    for pair in &mut rule {
        pair.1 /= total;
    }
    rule
}

// 15-point Kronrod extension of the 7-point Gauss rule on [-1, 1].
// Abscissae/weights are the standard QUADPACK constants.
const GK_NODES: [f64; 8] = [
    0.991_455_371_120_813,
    0.949_107_912_342_759,
    0.864_864_423_359_769,
    0.741_531_185_599_394,
    0.586_087_235_467_691,
    0.405_845_151_377_397,
    0.207_784_955_007_898,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529,
    0.063_092_092_629_979,
    0.104_790_010_322_250,
    0.140_653_259_715_525,
    0.169_004_726_639_267,
    0.190_350_578_064_785,
    0.204_432_940_075_298,
    0.209_482_141_084_728,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_870,
    0.279_705_391_489_277,
    0.381_830_050_505_119,
    0.417_959_183_673_469,
];

/// One Gauss-Kronrod 7/15 pass over `[a, b]`; returns `(k15, |k15 - g7|)`.
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut k15 = 0.0;
    let mut g7 = 0.0;
    for (i, &x) in GK_NODES.iter().enumerate() {
        let (flo, fhi) = if x == 0.0 {
            let v = f(mid);
            (v, 0.0)
        } else {
            (f(mid - half * x), f(mid + half * x))
        };
        let pair = flo + fhi;
        k15 += K15_WEIGHTS[i] * pair;
        if !i.is_multiple_of(2) || x == 0.0 {
            g7 += G7_WEIGHTS[i / 2] * pair;
        }
    }
    (k15 * half, (k15 - g7).abs() * half.abs())
}

/// Adaptive Gauss-Kronrod integration of `f` over `[a, b]` down to the given
/// absolute tolerance. Deterministic bisection order, depth capped at 48.
pub fn adaptive_gk<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (val, err) = gk15(f, a, b);
        if err <= tol || depth >= 48 {
            val
        } else {
            let mid = 0.5 * (a + b);
            recurse(f, a, mid, 0.5 * tol, depth + 1) + recurse(f, mid, b, 0.5 * tol, depth + 1)
        }
    }
    recurse(f, a, b, abs_tol.max(f64::MIN_POSITIVE), 0)
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// `log Σ exp(x_i)` without overflow.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_pdf(z: f64) -> f64 {
    standard_normal().pdf(z)
}

pub fn normal_cdf(z: f64) -> f64 {
    standard_normal().cdf(z)
}

/// Standard normal quantile, polished with one Newton step so round trips
/// through `normal_cdf` hold to near machine precision.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile level must be in (0, 1)");
    let mut x = standard_normal().inverse_cdf(p);
    for _ in 0..2 {
        let density = normal_pdf(x);
        if density <= f64::MIN_POSITIVE {
            break;
        }
        let step = (normal_cdf(x) - p) / density;
        if !step.is_finite() {
            break;
        }
        x -= step;
        if step.abs() < 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    x
}

/// Safeguarded Newton for a strictly increasing function.
///
/// `eval` returns `(value, derivative)` of the residual at a point; `lo`/`hi`
/// must bracket the root (`f(lo) <= 0 <= f(hi)`). Newton steps are accepted
/// only inside the current bracket, otherwise the step falls back to
/// bisection. Stops when `|value| <= tol` or the bracket degenerates.
pub fn newton_bisect<F: FnMut(f64) -> (f64, f64)>(
    mut eval: F,
    mut lo: f64,
    mut hi: f64,
    x0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<f64, RootError> {
    let mut x = x0.clamp(lo, hi);
    let mut best = (f64::INFINITY, x);
    for _ in 0..max_iter {
        let (val, deriv) = eval(x);
        if !val.is_finite() {
            return Err(RootError::NonFinite { at: x });
        }
        if val.abs() < best.0 {
            best = (val.abs(), x);
        }
        if val.abs() <= tol {
            return Ok(x);
        }
        if val > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let newton = if deriv > 0.0 {
            x - val / deriv
        } else {
            f64::NAN
        };
        x = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * (1.0 + x.abs()) {
            // Bracket exhausted at float resolution; accept the best point.
            return Ok(best.1);
        }
    }
    Err(RootError::NoConvergence {
        residual: best.0,
        at: best.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RootError {
    NonFinite { at: f64 },
    NoConvergence { residual: f64, at: f64 },
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_min<F: Fn(f64) -> f64>(f: &F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 { (x1, f1) } else { (x2, f2) }
}

/// Coarse grid scan followed by golden-section refinement around the best
/// grid cell. Robust when unimodality is only approximate.
pub fn scan_then_golden_min<F: Fn(f64) -> f64>(
    f: &F,
    lo: f64,
    hi: f64,
    grid: usize,
    tol: f64,
) -> (f64, f64) {
    assert!(grid >= 3);
    let step = (hi - lo) / (grid - 1) as f64;
    let mut best_i = 0;
    let mut best_v = f64::INFINITY;
    for i in 0..grid {
        let v = f(lo + step * i as f64);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let wlo = lo + step * best_i.saturating_sub(1) as f64;
    let whi = (lo + step * (best_i + 1) as f64).min(hi);
    golden_min(f, wlo, whi, tol)
}

/// Locates the switch point of a monotone boolean predicate on `[lo, hi]`
/// (`pred(lo) != pred(hi)` is required). Returns a point within `tol` of the
/// boundary, on the `pred(lo)` side.
pub fn bisect_transition<F: Fn(f64) -> bool>(pred: &F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let at_lo = pred(lo);
    debug_assert_ne!(at_lo, pred(hi), "predicate must switch on the bracket");
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if pred(mid) == at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_rule_matches_gaussian_moments() {
        for &n in &[21usize, 61, 121] {
            let rule = gauss_hermite_normal(n);
            let m0: f64 = rule.iter().map(|&(_, w)| w).sum();
            let m2: f64 = rule.iter().map(|&(z, w)| w * z * z).sum();
            let m4: f64 = rule.iter().map(|&(z, w)| w * z.powi(4)).sum();
            assert_abs_diff_eq!(m0, 1.0, epsilon = 1e-13);
            assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-11);
        }
    }

    #[test]
    fn adaptive_gk_integrates_gaussian() {
        let f = |x: f64| (-0.5 * x * x).exp();
        let v = adaptive_gk(&f, -12.0, 12.0, 1e-12);
        assert_abs_diff_eq!(v, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn normal_quantile_round_trips() {
        for &p in &[1e-9, 1e-4, 0.025, 0.5, 0.71, 0.975, 1.0 - 1e-6] {
            let z = normal_quantile(p);
            assert_abs_diff_eq!(normal_cdf(z), p, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(
            normal_quantile(0.975),
            1.959_963_984_540_054,
            epsilon = 1e-9
        );
    }

    #[test]
    fn newton_bisect_finds_cubic_root() {
        let root = newton_bisect(
            |x| (x * x * x - 2.0, 3.0 * x * x),
            0.0,
            4.0,
            1.0,
            1e-14,
            100,
        )
        .expect("converges");
        assert_abs_diff_eq!(root, 2f64.powf(1.0 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn golden_min_quadratic() {
        let (x, _) = golden_min(&|x: f64| (x - 1.25).powi(2), -4.0, 5.0, 1e-10);
        assert_abs_diff_eq!(x, 1.25, epsilon = 1e-8);
    }

    #[test]
    fn transition_bisection() {
        let z = bisect_transition(&|x: f64| x < 0.3, 0.0, 1.0, 1e-12);
        assert_abs_diff_eq!(z, 0.3, epsilon = 1e-10);
    }
}
