//! Closed-form and quadrature oracles for the linear (Ornstein-Uhlenbeck)
//! case and the Lévy-measure mixture.
//!
//! For `dX = BX dt + A dL` with isotropic stable-type noise of symbol
//! `c_L |z|^α`, the stochastic convolution `Z_t = ∫_0^t e^{(t-s)B} A dL_s`
//! has characteristic function `exp(-c_L ∫_0^t |z* e^{sB} A|^α ds)`. The
//! noise Lévy measure itself is the Gaussian mixture
//! `ν_L(Γ) = ∫_0^∞ (2πs)^{-d/2} ∫_Γ e^{-|y|²/2s} dy ν_S(ds)`, and
//! functionals `∫ g dν_L` are evaluated by integrating the Gaussian mean
//! `h(s) = E g(√s ξ)` against `ν_S`.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};
use statrs::function::gamma::{gamma, gamma_li, gamma_ui};

use crate::error::{Error, Result};
use crate::linalg::expm;
use crate::quad::{adaptive_simpson, gauss_hermite};
use crate::subordinator::SubordinatorSpec;

/// Linear system with calibrated noise symbol `c_L |z|^α`.
#[derive(Debug, Clone)]
pub struct OuSystem {
    pub b_mat: DMatrix<f64>,
    pub a_mat: DMatrix<f64>,
    /// Stability index in `(0, 2)`.
    pub alpha: f64,
    /// Characteristic scale of the noise symbol.
    pub c_l: f64,
}

impl OuSystem {
    pub fn new(b_mat: DMatrix<f64>, a_mat: DMatrix<f64>, alpha: f64, c_l: f64) -> Result<Self> {
        if !b_mat.is_square() || !a_mat.is_square() || b_mat.nrows() != a_mat.nrows() {
            return Err(Error::DimensionMismatch(
                "system matrices must be square and of equal size".into(),
            ));
        }
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::invalid("alpha", "stability index must lie in (0, 2)"));
        }
        if !(c_l > 0.0) {
            return Err(Error::invalid("c_l", "characteristic scale must be positive"));
        }
        Ok(Self {
            b_mat,
            a_mat,
            alpha,
            c_l,
        })
    }

    /// Calibrate `alpha` and `c_L` from a stable subordinator:
    /// `alpha = 2β`, `c_L = c·Γ(1−β)/(β·2^β)`.
    pub fn calibrated(
        b_mat: DMatrix<f64>,
        a_mat: DMatrix<f64>,
        spec: &SubordinatorSpec,
    ) -> Result<Self> {
        let cal = stable_calibration(spec)?;
        Self::new(b_mat, a_mat, cal.alpha, cal.c_l)
    }

    pub fn dim(&self) -> usize {
        self.b_mat.nrows()
    }
}

/// Calibration constants of the subordinated noise for a stable clock.
#[derive(Debug, Clone, Copy)]
pub struct StableCalibration {
    pub alpha: f64,
    pub c_l: f64,
}

/// `E e^{i z·W_{S_t}} = e^{-t c_L |z|^{2β}}` with `c_L = c Γ(1-β)/(β 2^β)`:
/// the Laplace exponent `∫ (1-e^{-su}) c u^{-1-β} du = c Γ(1-β) s^β / β`
/// evaluated at `s = |z|²/2`.
pub fn stable_calibration(spec: &SubordinatorSpec) -> Result<StableCalibration> {
    let (beta, c) = spec.stable_params().ok_or_else(|| {
        Error::Unsupported("calibration has a closed form only for the stable kind".into())
    })?;
    Ok(StableCalibration {
        alpha: 2.0 * beta,
        c_l: c * gamma(1.0 - beta) / (beta * 2f64.powf(beta)),
    })
}

/// Direction exponent `I_t(ω) = ∫_0^t |ω e^{sB} A|^α ds` for a unit row
/// vector `ω`. The characteristic function exponent is positively
/// homogeneous: `exp(-c_L |z|^α I_t(ẑ))`.
pub fn direction_exponent(sys: &OuSystem, t: f64, omega: &RowDVector<f64>) -> Result<f64> {
    if omega.len() != sys.dim() {
        return Err(Error::DimensionMismatch("direction dimension mismatch".into()));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let integrand = |s: f64| {
        let row = omega * expm(&(s * &sys.b_mat)) * &sys.a_mat;
        row.norm().powf(sys.alpha)
    };
    let rough = (integrand(0.0) + integrand(0.5 * t) + integrand(t)) * t / 3.0;
    adaptive_simpson(integrand, 0.0, t, 1e-11 * (1.0 + rough.abs()))
}

/// Characteristic function `E e^{i z·Z_t}` of the stochastic convolution;
/// real-valued (the noise is symmetric) with modulus at most 1.
pub fn ou_char_function(sys: &OuSystem, t: f64, z: &DVector<f64>) -> Result<Complex<f64>> {
    if !(t >= 0.0) {
        return Err(Error::invalid("t", "time must be nonnegative"));
    }
    let r = z.norm();
    if r == 0.0 {
        return Ok(Complex::new(1.0, 0.0));
    }
    let omega = RowDVector::from_iterator(z.len(), z.iter().map(|v| v / r));
    let exponent = direction_exponent(sys, t, &omega)?;
    Ok(Complex::new((-sys.c_l * r.powf(sys.alpha) * exponent).exp(), 0.0))
}

/// Worst-case CF bias of the truncated clock for this system over a z-grid:
/// `max_z t_eff(z)` with `t_eff = ∫_0^t (|z*e^{sB}A|²/2)² ds · m₂(ε)/2`.
pub fn ou_truncation_bias(
    sys: &OuSystem,
    spec: &SubordinatorSpec,
    eps: f64,
    t: f64,
    z_grid: &[DVector<f64>],
) -> Result<f64> {
    let m2 = spec.truncated_second_moment(eps)?;
    let mut worst = 0.0_f64;
    for z in z_grid {
        let zt = RowDVector::from_iterator(z.len(), z.iter().cloned());
        let integrand = |s: f64| {
            let row = &zt * expm(&(s * &sys.b_mat)) * &sys.a_mat;
            let g = 0.5 * row.norm_squared();
            g * g
        };
        let rough = (integrand(0.0) + integrand(t)) * 0.5 * t;
        let integral = adaptive_simpson(integrand, 0.0, t, 1e-9 * (1.0 + rough.abs()))?;
        worst = worst.max(0.5 * integral * m2);
    }
    Ok(worst)
}

fn sphere_directions(dim: usize, resolution: usize) -> Vec<RowDVector<f64>> {
    match dim {
        1 => vec![RowDVector::from_vec(vec![1.0])],
        2 => (0..resolution)
            .map(|k| {
                let theta = std::f64::consts::PI * k as f64 / resolution as f64;
                RowDVector::from_vec(vec![theta.cos(), theta.sin()])
            })
            .collect(),
        3 => {
            // Fibonacci hemisphere; the integrands are even in ω.
            let golden = (1.0 + 5f64.sqrt()) / 2.0;
            (0..resolution)
                .map(|k| {
                    let z = (k as f64 + 0.5) / resolution as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let phi = 2.0 * std::f64::consts::PI * (k as f64 / golden).fract();
                    RowDVector::from_vec(vec![r * phi.cos(), r * phi.sin(), z])
                })
                .collect()
        }
        _ => {
            // fixed pseudo-random sample: adequate for infimum probing,
            // not for angular quadrature
            use rand::Rng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = crate::seeding::stream_rng(0x5D1E, dim as u64);
            (0..resolution)
                .map(|_| {
                    loop {
                        let v = RowDVector::from_fn(dim, |_, _| {
                            <StandardNormal as Distribution<f64>>::sample(
                                &StandardNormal,
                                &mut rng,
                            )
                        });
                        let norm = v.norm();
                        if norm > 1e-6 {
                            break v / norm;
                        }
                        let _: f64 = rng.random();
                    }
                })
                .collect()
        }
    }
}

/// Exponential decay rate `inf_{|a|=1} I_t(a)` of the characteristic
/// function, approximated over an angular sample augmented by the left
/// kernel candidates of the Kalman stack (which catch exact degeneracies).
pub fn cf_decay_rate(sys: &OuSystem, t: f64, resolution: usize) -> Result<f64> {
    let d = sys.dim();
    let mut directions = sphere_directions(d, resolution);
    // left singular directions of [A, BA, …, B^{d-1}A] with tiny singular
    // values annihilate every column, hence every a e^{sB} A
    let mut stacked = DMatrix::zeros(d, d * d);
    let mut power = sys.a_mat.clone();
    for k in 0..d {
        stacked.view_mut((0, k * d), (d, d)).copy_from(&power);
        power = &sys.b_mat * &power;
    }
    let svd = stacked.svd(true, false);
    if let Some(u) = svd.u {
        for i in 0..d {
            directions.push(RowDVector::from_iterator(d, u.column(i).iter().cloned()));
        }
    }
    let mut rate = f64::INFINITY;
    for omega in &directions {
        rate = rate.min(direction_exponent(sys, t, omega)?);
    }
    Ok(rate)
}

/// Result of [`smoothness_moment_integral`].
#[derive(Debug, Clone, Copy)]
pub struct MomentIntegral {
    /// Bulk `∫_{|z| ≤ R} |z|^m |CF| dz`.
    pub value: f64,
    /// Tail `∫_{|z| > R}` from the same angular sample (infinite when the
    /// decay rate vanishes).
    pub tail: f64,
    /// `inf_a I_t(a)`; positive exactly when the Kalman condition holds.
    pub decay_rate: f64,
    /// Set when the decay rate is below tolerance: the moment integral is
    /// then expected to diverge and the density need not be smooth.
    pub degenerate: bool,
}

impl MomentIntegral {
    pub fn total(&self) -> f64 {
        self.value + self.tail
    }
}

/// `∫_{|z| ≤ R} |z|^m |E e^{iz·Z_t}| dz` with an extrapolated tail bound.
///
/// Radial integrals are exact incomplete-gamma expressions per direction;
/// the angular average uses `resolution` sample directions (exact for
/// `d = 1`).
pub fn smoothness_moment_integral(
    sys: &OuSystem,
    t: f64,
    m: u32,
    radius: f64,
    resolution: usize,
) -> Result<MomentIntegral> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius", "truncation radius must be positive"));
    }
    if !(t > 0.0) {
        return Err(Error::invalid("t", "time must be positive"));
    }
    let d = sys.dim();
    if d > 3 {
        return Err(Error::Unsupported(format!(
            "moment-integral angular quadrature implemented for dimension ≤ 3, got {d}"
        )));
    }
    let directions = sphere_directions(d, resolution);
    // full-sphere weight per direction (directions cover a half sphere;
    // the integrand is even)
    let sphere_area = match d {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 4.0 * std::f64::consts::PI,
    };
    let weight = sphere_area / directions.len() as f64;
    let p = (m as f64) + (d as f64) - 1.0;
    let a_gamma = (p + 1.0) / sys.alpha;

    let mut bulk = 0.0;
    let mut tail = 0.0;
    let mut rate = f64::INFINITY;
    for omega in &directions {
        let exponent = direction_exponent(sys, t, omega)?;
        rate = rate.min(exponent);
        let lambda = sys.c_l * exponent;
        if lambda <= 0.0 {
            tail = f64::INFINITY;
            continue;
        }
        // ∫_0^R r^p e^{-λ r^α} dr = λ^{-(p+1)/α} γ((p+1)/α, λR^α) / α
        let x = lambda * radius.powf(sys.alpha);
        let scale = lambda.powf(-a_gamma) / sys.alpha;
        bulk += weight * scale * gamma_li(a_gamma, x);
        tail += weight * scale * gamma_ui(a_gamma, x);
    }
    let min_rate = cf_decay_rate(sys, t, resolution)?.min(rate);
    let degenerate = min_rate <= 1e-12;
    Ok(MomentIntegral {
        value: bulk,
        tail: if degenerate { f64::INFINITY } else { tail },
        decay_rate: min_rate,
        degenerate,
    })
}

/// Smallest radius (by doubling) whose tail estimate is below
/// `tail_fraction` of the bulk.
pub fn pick_truncation_radius(
    sys: &OuSystem,
    t: f64,
    m: u32,
    tail_fraction: f64,
    resolution: usize,
) -> Result<f64> {
    let mut radius = 1.0;
    for _ in 0..60 {
        let probe = smoothness_moment_integral(sys, t, m, radius, resolution)?;
        if probe.degenerate {
            return Err(Error::invalid(
                "sys",
                "degenerate system: moment integral has no finite tail",
            ));
        }
        if probe.tail <= tail_fraction * probe.value.max(f64::MIN_POSITIVE) {
            return Ok(radius);
        }
        radius *= 2.0;
    }
    Err(Error::Quadrature("no adequate truncation radius found".into()))
}

/// Density of `Z_t` for a one-dimensional system by Fourier inversion of the
/// characteristic function: `p(x) = π^{-1} ∫_0^∞ CF(z) cos(zx) dz`.
pub fn cf_density_1d(sys: &OuSystem, t: f64, x: f64) -> Result<f64> {
    if sys.dim() != 1 {
        return Err(Error::DimensionMismatch("CF inversion implemented for d = 1".into()));
    }
    let omega = RowDVector::from_vec(vec![1.0]);
    let exponent = sys.c_l * direction_exponent(sys, t, &omega)?;
    if exponent <= 0.0 {
        return Err(Error::invalid("sys", "characteristic function does not decay"));
    }
    // integrate out to where the CF is below 1e-14
    let z_max = (32.0 / exponent).powf(1.0 / sys.alpha);
    let integral = adaptive_simpson(
        |z: f64| (-exponent * z.powf(sys.alpha)).exp() * (z * x).cos(),
        0.0,
        z_max,
        1e-10,
    )?;
    Ok(integral / std::f64::consts::PI)
}

/// Options for the `ν_S`-mixture quadrature.
#[derive(Debug, Clone, Copy)]
pub struct MixtureOptions {
    /// Relative tolerance on the returned integral.
    pub rel_tol: f64,
    /// Lower cutoff below which `h(s) ≈ h'(0)s` is used analytically.
    pub s_floor: f64,
    /// Gauss-Hermite order for generic Gaussian means in dimension 1
    /// (dimensions 2 and 3 use capped orders).
    pub hermite_order: usize,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-7,
            s_floor: 1e-12,
            hermite_order: 128,
        }
    }
}

/// `∫_0^∞ h(s) ν_S(ds)` for integrands with `h(s) = O(s)` at zero and a
/// settled limit at infinity. `h` returns `(value, uncertainty)`; exact
/// evaluators report uncertainty 0, quadrature-backed ones report an
/// order-disagreement estimate.
///
/// The head `(0, s_floor]` uses the linear asymptote `h(s) ≈ (h(s_floor)/
/// s_floor)·s` against the truncated first moment; the body is adaptive
/// Simpson in `log s`; the tail beyond the detected settling point of `h`
/// contributes `h(s_pl) · ν_S([s_pl, ∞))`. The settling point is the first
/// scan point whose entire trusted future varies by less than the tail
/// budget allows; the scan is truncated where `h`'s own uncertainty blows up
/// (the inner rule running out of resolution), and integrands that keep
/// growing are reported as divergent.
pub fn subordinate_mixture_integral<F: FnMut(f64) -> (f64, f64)>(
    spec: &SubordinatorSpec,
    mut h: F,
    opts: MixtureOptions,
) -> Result<f64> {
    let s_lo = opts.s_floor;
    let head = (h(s_lo).0 / s_lo) * spec.truncated_first_moment(s_lo)?;

    // quarter-octave scan, then truncated where the inner quadrature
    // degrades (uncertainty gauged against the global scale of h, so that
    // harmless roundoff noise at tiny values does not trip the gate)
    let step = 2f64.powf(0.25);
    let mut full: Vec<(f64, f64, f64)> = Vec::with_capacity(384);
    let mut s = s_lo;
    while s <= 1e15 {
        let (value, unc) = h(s);
        full.push((s, value, unc));
        s *= step;
    }
    let h_scale = full.iter().map(|g| g.1.abs()).fold(0.0, f64::max);
    let gate = opts.rel_tol.max(1e-10) * h_scale.max(1e-300);
    let trust = full
        .iter()
        .position(|&(_, _, unc)| unc > gate)
        .unwrap_or(full.len());
    let grid = &full[..trust];
    if grid.len() < 4 {
        return Err(Error::Quadrature(
            "inner Gaussian means are unreliable over the whole mixture range".into(),
        ));
    }

    let mut rough = head;
    for w in grid.windows(2) {
        let (s0, h0, _) = w[0];
        let (s1, h1, _) = w[1];
        rough += 0.5 * (h0 * spec.density(s0) * s0 + h1 * spec.density(s1) * s1) * (s1 / s0).ln();
    }
    let tol_abs = opts.rel_tol * rough.abs().max(1e-12 * h_scale).max(1e-300);

    // Freezing h at s_k misestimates the tail by at most the future
    // deviation (plus the future uncertainty) times the remaining mass; the
    // margin covers wiggle between scan points. The last two points carry no
    // forward evidence and cannot anchor a plateau.
    let mut plateau: Option<(f64, f64)> = None;
    'scan: for k in 0..grid.len().saturating_sub(2) {
        let (s_k, h_k, _) = grid[k];
        let future_dev = grid[k..]
            .iter()
            .map(|(_, v, u)| (v - h_k).abs() + u)
            .fold(0.0, f64::max)
            + 1e-13 * h_scale;
        if 3.0 * future_dev * spec.tail_mass(s_k)? <= tol_abs {
            plateau = Some((s_k, h_k));
            break 'scan;
        }
    }
    // On failure, the trend of the projected tail contribution |h|·ν([s,∞))
    // distinguishes a genuinely divergent functional from one that merely
    // failed to settle within the trusted scan.
    let (s_pl, h_pl) = match plateau {
        Some(p) => p,
        None => {
            let mut min_score = f64::INFINITY;
            for &(s_k, h_k, _) in grid.iter() {
                min_score = min_score.min(h_k.abs() * spec.tail_mass(s_k)?);
            }
            let (s_end, h_end, _) = *grid.last().unwrap();
            let end_score = h_end.abs() * spec.tail_mass(s_end)?;
            return Err(if end_score > 4.0 * min_score.max(1e-300) {
                Error::Quadrature(
                    "mixture tail diverges: |h|·ν_S([s,∞)) keeps growing along the scan".into(),
                )
            } else {
                Error::Quadrature("mixture tail did not settle below tolerance".into())
            });
        }
    };

    let body = if s_pl > s_lo {
        adaptive_simpson(
            |u: f64| {
                let s = u.exp();
                h(s).0 * spec.density(s) * s
            },
            s_lo.ln(),
            s_pl.ln(),
            0.5 * tol_abs,
        )?
    } else {
        0.0
    };
    Ok(head + body + h_pl * spec.tail_mass(s_pl)?)
}

/// Paired Gauss-Hermite orders used to estimate the reliability of generic
/// Gaussian means: the main order per dimension and a lower even order whose
/// disagreement with it bounds the quadrature error.
pub fn hermite_order_pair(dim: usize, base: usize) -> (usize, usize) {
    let hi = match dim {
        1 => base,
        2 => base.min(96),
        _ => base.min(48),
    };
    let mut lo = (2 * hi) / 3;
    if lo % 2 == 1 {
        lo += 1;
    }
    (hi, lo.max(8))
}

/// Gaussian mean `E g(sd · ξ)` for `ξ ~ N(0, I_d)` by tensor Gauss-Hermite
/// quadrature (`d ≤ 3`).
pub fn gaussian_mean_nd<F: FnMut(&DVector<f64>) -> f64>(
    dim: usize,
    order: usize,
    sd: f64,
    mut g: F,
) -> Result<f64> {
    let rule = gauss_hermite(order);
    let (nodes, weights) = (&rule.0, &rule.1);
    let norm = std::f64::consts::PI.sqrt().powi(dim as i32);
    let scale = std::f64::consts::SQRT_2 * sd;
    let mut acc = 0.0;
    match dim {
        1 => {
            let mut y = DVector::zeros(1);
            for (&x, &w) in nodes.iter().zip(weights) {
                y[0] = scale * x;
                acc += w * g(&y);
            }
        }
        2 => {
            let mut y = DVector::zeros(2);
            for (&x0, &w0) in nodes.iter().zip(weights) {
                y[0] = scale * x0;
                for (&x1, &w1) in nodes.iter().zip(weights) {
                    y[1] = scale * x1;
                    acc += w0 * w1 * g(&y);
                }
            }
        }
        3 => {
            let mut y = DVector::zeros(3);
            for (&x0, &w0) in nodes.iter().zip(weights) {
                y[0] = scale * x0;
                for (&x1, &w1) in nodes.iter().zip(weights) {
                    y[1] = scale * x1;
                    for (&x2, &w2) in nodes.iter().zip(weights) {
                        y[2] = scale * x2;
                        acc += w0 * w1 * w2 * g(&y);
                    }
                }
            }
        }
        _ => {
            return Err(Error::Unsupported(format!(
                "gaussian means implemented for dimension ≤ 3, got {dim}"
            )))
        }
    }
    Ok(acc / norm)
}

/// `∫ g(y) ν_L(dy)` for an even functional with `|g(y)| ≤ C(1 ∧ |y|²)` near
/// zero, via the mixture `∫_0^∞ E_{Y~N(0,sI)} g(Y) ν_S(ds)`.
pub fn levy_quadrature<F: Fn(&DVector<f64>) -> f64>(
    spec: &SubordinatorSpec,
    dim: usize,
    g: F,
    opts: MixtureOptions,
) -> Result<f64> {
    // evenness and vanishing at zero are integrability preconditions
    let origin = DVector::zeros(dim);
    let g0 = g(&origin);
    let mut probe_scale = g0.abs();
    for k in 0..4 {
        let y = DVector::from_fn(dim, |i, _| 0.7 * ((k * dim + i + 1) as f64).sin());
        let plus = g(&y);
        let minus = g(&(-&y));
        probe_scale = probe_scale.max(plus.abs());
        if (plus - minus).abs() > 1e-9 * plus.abs().max(1.0) {
            return Err(Error::invalid("g", "functional must be even"));
        }
    }
    if g0.abs() > 1e-12 * probe_scale.max(1.0) {
        return Err(Error::invalid(
            "g",
            "functional must vanish at the origin (|g| ≤ C(1∧|y|²))",
        ));
    }
    let (hi, lo) = hermite_order_pair(dim, opts.hermite_order);
    subordinate_mixture_integral(
        spec,
        |s| {
            let sd = s.sqrt();
            let value = gaussian_mean_nd(dim, hi, sd, &g).expect("dimension validated");
            let check = gaussian_mean_nd(dim, lo, sd, &g).expect("dimension validated");
            (value, (value - check).abs())
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::{integrate_to_infinity, integrate_to_zero};
    use approx::assert_relative_eq;

    fn c_l_half() -> f64 {
        (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn calibration_examples() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let cal = stable_calibration(&spec).unwrap();
        assert_relative_eq!(cal.alpha, 1.0);
        assert_relative_eq!(cal.c_l, c_l_half(), epsilon = 1e-12);

        let spec2 = SubordinatorSpec::stable(0.5, 2.0).unwrap();
        assert_relative_eq!(
            stable_calibration(&spec2).unwrap().c_l,
            2.0 * c_l_half(),
            epsilon = 1e-12
        );

        let spec3 = SubordinatorSpec::stable(0.25, 1.0).unwrap();
        let cal3 = stable_calibration(&spec3).unwrap();
        assert_relative_eq!(cal3.alpha, 0.5);
        assert_relative_eq!(
            cal3.c_l,
            gamma(0.75) / (0.25 * 2f64.powf(0.25)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn calibration_matches_numeric_laplace_exponent() {
        // c_L = ψ(1/2) where ψ(s) = ∫ (1-e^{-su}) ν(du)
        for (beta, c) in [(0.25, 1.0), (0.5, 1.0), (0.7, 2.0)] {
            let spec = SubordinatorSpec::stable(beta, c).unwrap();
            let cal = stable_calibration(&spec).unwrap();
            let s = 0.5;
            let psi_low = integrate_to_zero(
                |u| -(-s * u).exp_m1() * c * u.powf(-1.0 - beta),
                1.0,
                1e-10,
            )
            .unwrap();
            let psi_high = integrate_to_infinity(
                |u| -(-s * u).exp_m1() * c * u.powf(-1.0 - beta),
                1.0,
                1e-10,
            )
            .unwrap();
            assert_relative_eq!(cal.c_l, psi_low + psi_high, max_relative = 1e-7);
        }
    }

    #[test]
    fn pure_stable_cf() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let sys = OuSystem::calibrated(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), &spec)
            .unwrap();
        for z in [
            DVector::from_vec(vec![0.7, 0.0]),
            DVector::from_vec(vec![1.0, -2.0]),
        ] {
            let cf = ou_char_function(&sys, 1.3, &z).unwrap();
            let truth = (-1.3 * c_l_half() * z.norm()).exp();
            assert_relative_eq!(cf.re, truth, max_relative = 1e-9);
            assert_eq!(cf.im, 0.0);
        }
        assert_eq!(
            ou_char_function(&sys, 1.0, &DVector::zeros(2)).unwrap(),
            Complex::new(1.0, 0.0)
        );
    }

    #[test]
    fn kinetic_cf_closed_form() {
        let sys = OuSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]),
            1.0,
            c_l_half(),
        )
        .unwrap();
        // |z* e^{sB} A| = |s z_1 + z_2|
        let cf = ou_char_function(&sys, 1.0, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(cf.re, (-c_l_half() * 0.5).exp(), max_relative = 1e-9);
        let cf2 = ou_char_function(&sys, 1.0, &DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_relative_eq!(cf2.re, (-c_l_half()).exp(), max_relative = 1e-9);
    }

    #[test]
    fn moment_integral_scalar_exponential() {
        // d=1, B=0, A=1, α=1, m=0: ∫ e^{-c_L t |z|} dz = 2/(c_L t)
        let sys = OuSystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            1.0,
            c_l_half(),
        )
        .unwrap();
        let t = 0.8;
        let radius = pick_truncation_radius(&sys, t, 0, 1e-6, 1).unwrap();
        let mi = smoothness_moment_integral(&sys, t, 0, radius, 1).unwrap();
        assert!(!mi.degenerate);
        assert_relative_eq!(mi.total(), 2.0 / (c_l_half() * t), max_relative = 1e-6);
    }

    #[test]
    fn moment_integral_flags_degenerate_system() {
        // B = 0, A = diag(0,1): direction (1,0) has zero decay
        let sys = OuSystem::new(
            DMatrix::zeros(2, 2),
            DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]),
            1.0,
            1.0,
        )
        .unwrap();
        let mi = smoothness_moment_integral(&sys, 1.0, 0, 10.0, 64).unwrap();
        assert!(mi.degenerate);
        assert!(mi.decay_rate <= 1e-12);
        assert!(mi.tail.is_infinite());
    }

    #[test]
    fn moment_integral_kinetic_growing_in_order() {
        let sys = OuSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]),
            1.0,
            c_l_half(),
        )
        .unwrap();
        let radius = pick_truncation_radius(&sys, 1.0, 3, 1e-6, 128).unwrap();
        let m1 = smoothness_moment_integral(&sys, 1.0, 1, radius, 128).unwrap();
        let m2 = smoothness_moment_integral(&sys, 1.0, 2, radius, 128).unwrap();
        let m3 = smoothness_moment_integral(&sys, 1.0, 3, radius, 128).unwrap();
        assert!(m1.total().is_finite());
        assert!(m2.total() > m1.total());
        assert!(m3.total() > m2.total());
        assert!(!m2.degenerate);
    }

    #[test]
    fn levy_symbol_from_mixture() {
        // g = 1 - cos(z·y): ∫ g dν_L = c_L |z|^{2β}
        for (beta, c) in [(0.5, 1.0), (0.25, 1.0)] {
            let spec = SubordinatorSpec::stable(beta, c).unwrap();
            let cal = stable_calibration(&spec).unwrap();
            for znorm in [0.5_f64, 1.0, 2.0] {
                let got = levy_quadrature(
                    &spec,
                    1,
                    |y: &DVector<f64>| 1.0 - (znorm * y[0]).cos(),
                    MixtureOptions::default(),
                )
                .unwrap();
                let want = cal.c_l * znorm.powf(2.0 * beta);
                assert_relative_eq!(got, want, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn levy_symbol_two_dimensional() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let z = DVector::from_vec(vec![0.8, -0.6]);
        let got = levy_quadrature(
            &spec,
            2,
            |y: &DVector<f64>| 1.0 - z.dot(y).cos(),
            MixtureOptions::default(),
        )
        .unwrap();
        assert_relative_eq!(got, c_l_half() * z.norm(), max_relative = 1e-6);
    }

    #[test]
    fn levy_quadrature_zero_functional() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let got = levy_quadrature(&spec, 1, |_: &DVector<f64>| 0.0, MixtureOptions::default())
            .unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn levy_quadrature_rejects_bad_functionals() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        // odd functional
        assert!(levy_quadrature(&spec, 1, |y: &DVector<f64>| y[0], MixtureOptions::default())
            .is_err());
        // nonvanishing at the origin
        assert!(levy_quadrature(
            &spec,
            1,
            |_: &DVector<f64>| 1.0,
            MixtureOptions::default()
        )
        .is_err());
        // growing too fast for the tail
        assert!(levy_quadrature(
            &spec,
            1,
            |y: &DVector<f64>| y[0].powi(4),
            MixtureOptions::default()
        )
        .is_err());
    }

    #[test]
    fn decay_rate_positive_iff_kalman() {
        let a = DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]);
        let kinetic = OuSystem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            a.clone(),
            1.0,
            1.0,
        )
        .unwrap();
        assert!(cf_decay_rate(&kinetic, 1.0, 64).unwrap() > 1e-4);
        let degenerate = OuSystem::new(DMatrix::zeros(2, 2), a, 1.0, 1.0).unwrap();
        assert!(cf_decay_rate(&degenerate, 1.0, 64).unwrap() <= 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(OuSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), 2.5, 1.0).is_err());
        assert!(OuSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(3, 3), 1.0, 1.0).is_err());
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let sys = OuSystem::calibrated(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), &spec)
            .unwrap();
        assert!(ou_char_function(&sys, -1.0, &DVector::zeros(1)).is_err());
    }
}
