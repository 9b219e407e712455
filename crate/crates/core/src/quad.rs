//! One-dimensional quadrature primitives shared across the crate: adaptive
//! Simpson integration, dyadic shell integration toward 0 and infinity for
//! integrable singularities, and Gauss-Hermite rules for Gaussian
//! expectations.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 48;
/// Panels are refined at least this deep before the local error estimate is
/// trusted; coarse estimates on peaked integrands can otherwise pass the
/// Richardson test by accident.
const MIN_DEPTH: u32 = 6;

/// Adaptive Simpson integration of `f` over `[a, b]`.
///
/// The interval is split until the local Simpson refinement changes by less
/// than the local share of the tolerance. `tol` is treated as an absolute
/// tolerance on the whole interval.
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let m = 0.5 * (a + b);
    let fa = f(a);
    let fm = f(m);
    let fb = f(b);
    let whole = simpson(a, b, fa, fm, fb);
    let tol = tol.max(f64::MIN_POSITIVE);
    // Halving the tolerance per split guarantees the global budget, but a
    // floor stops roundoff noise in the integrand from forcing full-depth
    // recursion; the floored nodes contribute harmlessly below tol.
    let floor = tol * 2f64.powi(-26);
    let mut worst = 0.0_f64;
    let value = adapt(&mut f, a, b, fa, fm, fb, whole, tol, floor, 0, &mut worst);
    if worst > 0.0 {
        return Err(Error::Quadrature(format!(
            "adaptive Simpson hit depth {MAX_DEPTH} with residual {worst:.3e} on [{a}, {b}]"
        )));
    }
    Ok(value)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn adapt<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    floor: f64,
    depth: u32,
    worst: &mut f64,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if (depth >= MIN_DEPTH && delta.abs() <= 15.0 * tol)
        || (b - a).abs() < f64::EPSILON * (a.abs() + b.abs())
    {
        return left + right + delta / 15.0;
    }
    if depth >= MAX_DEPTH {
        *worst = worst.max(delta.abs());
        return left + right + delta / 15.0;
    }
    let child_tol = (0.5 * tol).max(floor);
    adapt(f, a, m, fa, flm, fm, left, child_tol, floor, depth + 1, worst)
        + adapt(f, m, b, fm, frm, fb, right, child_tol, floor, depth + 1, worst)
}

/// Integral of `f` over `(0, b]` where `f` may blow up (integrably) at 0.
///
/// Dyadic shells `[b/2^{k+1}, b/2^k]` are accumulated until three consecutive
/// shells fall below `rel_tol` of the running total. Non-decaying shells are
/// reported as non-convergence.
pub fn integrate_to_zero<F: FnMut(f64) -> f64>(mut f: F, b: f64, rel_tol: f64) -> Result<f64> {
    if b <= 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0_f64;
    let mut hi = b;
    let mut quiet = 0;
    for shell in 0..300 {
        let lo = 0.5 * hi;
        let part = adaptive_simpson(&mut f, lo, hi, rel_tol * 1e-3 * (1.0 + total.abs()))?;
        total += part;
        if part.abs() <= rel_tol * total.abs().max(f64::MIN_POSITIVE) {
            quiet += 1;
            if quiet >= 3 {
                return Ok(total);
            }
        } else {
            quiet = 0;
        }
        if shell > 60 && part.abs() > total.abs() {
            break;
        }
        hi = lo;
    }
    Err(Error::Quadrature(format!(
        "shell integration toward 0 did not converge on (0, {b}]"
    )))
}

/// Integral of `f` over `[a, ∞)` via dyadic shells `[a·2^k, a·2^{k+1}]`.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    rel_tol: f64,
) -> Result<f64> {
    assert!(a > 0.0, "lower bound must be positive");
    let mut total = 0.0_f64;
    let mut lo = a;
    let mut quiet = 0;
    let mut prev = f64::INFINITY;
    for shell in 0..300 {
        let hi = 2.0 * lo;
        let part = adaptive_simpson(&mut f, lo, hi, rel_tol * 1e-3 * (1.0 + total.abs()))?;
        total += part;
        if part.abs() <= rel_tol * total.abs().max(f64::MIN_POSITIVE) {
            quiet += 1;
            if quiet >= 3 {
                return Ok(total);
            }
        } else {
            quiet = 0;
        }
        if shell > 40 && part.abs() >= prev {
            return Err(Error::Quadrature(format!(
                "tail integral from {a} appears divergent (shell {shell} not decaying)"
            )));
        }
        prev = part.abs();
        lo = hi;
    }
    Err(Error::Quadrature(format!(
        "tail integral from {a} did not converge"
    )))
}

/// Gauss-Hermite rule with weight `exp(-x^2)`: nodes and weights.
///
/// Computed by the Golub-Welsch eigenvalue method and cached per order.
pub fn gauss_hermite(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(rule) = cache.lock().unwrap().get(&n) {
        return rule.clone();
    }
    assert!(n >= 1, "Gauss-Hermite order must be positive");
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let first = eig.eigenvectors[(0, i)];
            (node, std::f64::consts::PI.sqrt() * first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rule = Arc::new((
        pairs.iter().map(|p| p.0).collect(),
        pairs.iter().map(|p| p.1).collect(),
    ));
    cache.lock().unwrap().insert(n, rule.clone());
    rule
}

/// Expectation `E f(Z)` for `Z ~ N(0, 1)` by Gauss-Hermite quadrature.
pub fn gauss_hermite_mean<F: FnMut(f64) -> f64>(n: usize, mut f: F) -> f64 {
    let rule = gauss_hermite(n);
    let norm = 1.0 / std::f64::consts::PI.sqrt();
    let mut acc = 0.0;
    for (&x, &w) in rule.0.iter().zip(rule.1.iter()) {
        acc += w * f(std::f64::consts::SQRT_2 * x);
    }
    acc * norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn simpson_polynomial_exact() {
        let v = adaptive_simpson(|x| x * x * x - 2.0 * x + 1.0, -1.0, 2.0, 1e-12).unwrap();
        // antiderivative x^4/4 - x^2 + x
        assert_relative_eq!(v, 15.0 / 4.0 - 3.0 + 3.0, epsilon = 1e-10);
    }

    #[test]
    fn simpson_oscillatory() {
        let v = adaptive_simpson(|x| (10.0 * x).sin(), 0.0, 3.0, 1e-11).unwrap();
        assert_relative_eq!(v, (1.0 - (30.0_f64).cos()) / 10.0, epsilon = 1e-9);
    }

    #[test]
    fn shells_handle_integrable_singularity() {
        // ∫_0^1 u^{-1/2} du = 2
        let v = integrate_to_zero(|u| u.powf(-0.5), 1.0, 1e-10).unwrap();
        assert_relative_eq!(v, 2.0, epsilon = 1e-7);
    }

    #[test]
    fn shells_tail_integral() {
        // ∫_1^∞ u^{-3/2} du = 2
        let v = integrate_to_infinity(|u| u.powf(-1.5), 1.0, 1e-10).unwrap();
        assert_relative_eq!(v, 2.0, epsilon = 1e-7);
    }

    #[test]
    fn shells_detect_divergent_tail() {
        assert!(integrate_to_infinity(|u| 1.0 / u, 1.0, 1e-9).is_err());
    }

    #[test]
    fn hermite_moments() {
        for n in [8, 24, 64] {
            assert_relative_eq!(gauss_hermite_mean(n, |z| z * z), 1.0, epsilon = 1e-10);
            assert_relative_eq!(gauss_hermite_mean(n, |z| z * z * z * z), 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn hermite_gaussian_cf() {
        // E cos(w Z) = exp(-w^2/2)
        let got = gauss_hermite_mean(64, |z| (1.7 * z).cos());
        assert_relative_eq!(got, (-1.7_f64 * 1.7 / 2.0).exp(), epsilon = 1e-10);
    }
}
