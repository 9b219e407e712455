//! Empirical statistics on simulated ensembles: characteristic functions,
//! kernel density estimates, the nonlocal generator, and the weak
//! Fokker-Planck residual test.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::flow::{integrate_sampled, integrate_terminal, SdeModel};
use crate::noise::{synthesize_noise, synthesize_noise_with_times};
use crate::oracles::{gaussian_mean_nd, hermite_order_pair, subordinate_mixture_integral, MixtureOptions};
use crate::seeding::{path_stream, stream_rng};
use crate::subordinator::{SubordinatorSpec, DEFAULT_JUMP_CUT};

/// Provenance of a sample batch.
#[derive(Debug, Clone)]
pub struct EnsembleMeta {
    pub model_id: String,
    pub spec_id: String,
    pub t: f64,
    pub seed: u64,
    pub n: usize,
    pub jump_cut: f64,
}

/// Terminal states of a simulated batch.
#[derive(Debug, Clone)]
pub struct SampleEnsemble {
    pub samples: Vec<DVector<f64>>,
    pub meta: EnsembleMeta,
}

impl SampleEnsemble {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |x| x.len())
    }
}

/// Simulation options for ensemble generation.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub jump_cut: f64,
    pub dt_max: f64,
}

impl SimOptions {
    pub fn for_horizon(t: f64) -> Self {
        Self {
            jump_cut: DEFAULT_JUMP_CUT,
            dt_max: if t > 0.0 { t / 256.0 } else { 1.0 },
        }
    }
}

/// Simulate `n` independent terminal states `X_t` (streams `0..n` of the
/// root seed; reduction order fixed).
pub fn simulate_ensemble(
    model: &SdeModel,
    spec: &SubordinatorSpec,
    x0: &DVector<f64>,
    t: f64,
    n: usize,
    root_seed: u64,
    opts: SimOptions,
) -> Result<SampleEnsemble> {
    let samples: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(root_seed, path_stream(0, i as u64));
            let clock = spec.sample_path(t, opts.jump_cut, &mut rng)?;
            let noise = synthesize_noise(&clock, model.dim(), opts.dt_max, &mut rng)?;
            integrate_terminal(model, &noise, x0)
        })
        .collect::<Result<_>>()?;
    Ok(SampleEnsemble {
        samples,
        meta: EnsembleMeta {
            model_id: String::new(),
            spec_id: String::new(),
            t,
            seed: root_seed,
            n,
            jump_cut: opts.jump_cut,
        },
    })
}

/// Empirical characteristic function with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct CfEstimate {
    pub value: Complex<f64>,
    /// `sqrt((Var Re + Var Im)/N)`; at most `1/sqrt(N)`.
    pub std_error: f64,
}

/// `N^{-1} Σ e^{i z·X_k}` over the ensemble.
pub fn empirical_cf(ensemble: &SampleEnsemble, z: &DVector<f64>) -> CfEstimate {
    let n = ensemble.samples.len() as f64;
    let mut sum_re = 0.0;
    let mut sum_im = 0.0;
    let mut sum_re2 = 0.0;
    let mut sum_im2 = 0.0;
    for x in &ensemble.samples {
        let phase = z.dot(x);
        let (s, c) = phase.sin_cos();
        sum_re += c;
        sum_im += s;
        sum_re2 += c * c;
        sum_im2 += s * s;
    }
    let mean_re = sum_re / n;
    let mean_im = sum_im / n;
    let var = ((sum_re2 / n - mean_re * mean_re) + (sum_im2 / n - mean_im * mean_im)).max(0.0);
    CfEstimate {
        value: Complex::new(mean_re, mean_im),
        std_error: (var / n).sqrt(),
    }
}

/// Per-coordinate Silverman bandwidth on a robust scale: the median absolute
/// deviation replaces the sample standard deviation (stable laws have no
/// second moment).
pub fn silverman_bandwidth(ensemble: &SampleEnsemble) -> DVector<f64> {
    let d = ensemble.dim();
    let n = ensemble.samples.len() as f64;
    let rate = (4.0 / (d as f64 + 2.0)).powf(1.0 / (d as f64 + 4.0)) * n.powf(-1.0 / (d as f64 + 4.0));
    DVector::from_fn(d, |j, _| {
        let mut coords: Vec<f64> = ensemble.samples.iter().map(|x| x[j]).collect();
        let med = median_inplace(&mut coords);
        let mut dev: Vec<f64> = coords.iter().map(|v| (v - med).abs()).collect();
        let mad = median_inplace(&mut dev);
        let sigma = (mad / 0.674_489_750_196_08).max(1e-12);
        rate * sigma
    })
}

fn median_inplace(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Gaussian product-kernel density estimate at the given evaluation points.
pub fn kde_density(
    ensemble: &SampleEnsemble,
    grid: &[DVector<f64>],
    bandwidth: &DVector<f64>,
) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "evaluation grid must be nonempty"));
    }
    let d = ensemble.dim();
    if bandwidth.len() != d || bandwidth.iter().any(|&h| h <= 0.0) {
        return Err(Error::invalid("bandwidth", "need positive bandwidth per coordinate"));
    }
    let norm = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0)
        / bandwidth.iter().product::<f64>()
        / ensemble.samples.len() as f64;
    Ok(grid
        .par_iter()
        .map(|x| {
            let mut acc = 0.0;
            for sample in &ensemble.samples {
                let mut q = 0.0;
                for j in 0..d {
                    let u = (x[j] - sample[j]) / bandwidth[j];
                    q += u * u;
                }
                acc += (-0.5 * q).exp();
            }
            acc * norm
        })
        .collect())
}

type ScalarField = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradField = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type SmoothedField = dyn Fn(&DVector<f64>, f64, &DMatrix<f64>) -> f64 + Send + Sync;

/// A scalar test function with gradient and optional Gaussian-smoothing
/// evaluator `smoothed(x, s, A) = E f(x + √s A ξ)`, `ξ ~ N(0, I)`.
///
/// The smoothed form lets generator and semigroup estimators integrate the
/// Brownian layer out exactly; without it, Gaussian means fall back to
/// Gauss-Hermite cubature.
#[derive(Clone)]
pub struct TestFunction {
    eval: Arc<ScalarField>,
    grad: Arc<GradField>,
    smoothed: Option<Arc<SmoothedField>>,
}

impl TestFunction {
    pub fn new(eval: Arc<ScalarField>, grad: Arc<GradField>) -> Self {
        Self {
            eval,
            grad,
            smoothed: None,
        }
    }

    pub fn with_smoothed(mut self, smoothed: Arc<SmoothedField>) -> Self {
        self.smoothed = Some(smoothed);
        self
    }

    /// `f(x) = cos(z·x)` with exact smoothing
    /// `E f = cos(z·x)·exp(-s|A*z|²/2)`.
    pub fn cosine(z: DVector<f64>) -> Self {
        let z1 = z.clone();
        let z2 = z.clone();
        let z3 = z;
        Self {
            eval: Arc::new(move |x: &DVector<f64>| z1.dot(x).cos()),
            grad: Arc::new(move |x: &DVector<f64>| -z2.dot(x).sin() * &z2),
            smoothed: Some(Arc::new(move |x: &DVector<f64>, s: f64, a: &DMatrix<f64>| {
                let az = a.transpose() * &z3;
                z3.dot(x).cos() * (-0.5 * s * az.norm_squared()).exp()
            })),
        }
    }

    /// `f(x) = exp(-|x-m|²/(2w²))` with exact Gaussian-convolution smoothing.
    pub fn gaussian_bump(center: DVector<f64>, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::invalid("width", "bump width must be positive"));
        }
        let m1 = center.clone();
        let m2 = center.clone();
        let m3 = center;
        let w2 = width * width;
        Ok(Self {
            eval: Arc::new(move |x: &DVector<f64>| {
                (-(x - &m1).norm_squared() / (2.0 * w2)).exp()
            }),
            grad: Arc::new(move |x: &DVector<f64>| {
                let diff = x - &m2;
                (-diff.norm_squared() / (2.0 * w2)).exp() / w2 * (-diff)
            }),
            smoothed: Some(Arc::new(move |x: &DVector<f64>, s: f64, a: &DMatrix<f64>| {
                let d = x.len();
                let cov = DMatrix::identity(d, d) * w2 + s * a * a.transpose();
                let chol = cov.clone().cholesky().expect("covariance is PD");
                let diff = x - &m3;
                let sol = chol.solve(&diff);
                let det = chol.l().diagonal().iter().product::<f64>().powi(2);
                (w2.powi(d as i32) / det).sqrt() * (-0.5 * diff.dot(&sol)).exp()
            })),
        })
    }

    pub fn constant(c: f64) -> Self {
        Self {
            eval: Arc::new(move |_: &DVector<f64>| c),
            grad: Arc::new(|x: &DVector<f64>| DVector::zeros(x.len())),
            smoothed: Some(Arc::new(move |_: &DVector<f64>, _: f64, _: &DMatrix<f64>| c)),
        }
    }

    pub fn linear(w: DVector<f64>) -> Self {
        let w1 = w.clone();
        let w2 = w.clone();
        let w3 = w;
        Self {
            eval: Arc::new(move |x: &DVector<f64>| w1.dot(x)),
            grad: Arc::new(move |_: &DVector<f64>| w2.clone()),
            smoothed: Some(Arc::new(move |x: &DVector<f64>, _: f64, _: &DMatrix<f64>| {
                w3.dot(x)
            })),
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        (self.eval)(x)
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.grad)(x)
    }

    pub fn has_smoothed(&self) -> bool {
        self.smoothed.is_some()
    }

    /// `E f(x + √s A ξ)`: the attached closed form when present, otherwise
    /// Gauss-Hermite cubature.
    pub fn gaussian_mean(
        &self,
        x: &DVector<f64>,
        s: f64,
        a: &DMatrix<f64>,
        hermite_order: usize,
    ) -> Result<f64> {
        Ok(self.gaussian_mean_pair(x, s, a, hermite_order)?.0)
    }

    /// As [`TestFunction::gaussian_mean`], also returning an uncertainty
    /// estimate (0 for closed forms, order disagreement for cubature).
    pub fn gaussian_mean_pair(
        &self,
        x: &DVector<f64>,
        s: f64,
        a: &DMatrix<f64>,
        hermite_order: usize,
    ) -> Result<(f64, f64)> {
        if let Some(sm) = &self.smoothed {
            return Ok((sm(x, s, a), 0.0));
        }
        let d = x.len();
        let (hi, lo) = hermite_order_pair(d, hermite_order);
        let sd = s.sqrt();
        let value = gaussian_mean_nd(d, hi, sd, |v: &DVector<f64>| self.eval(&(x + a * v)))?;
        let check = gaussian_mean_nd(d, lo, sd, |v: &DVector<f64>| self.eval(&(x + a * v)))?;
        Ok((value, (value - check).abs()))
    }
}

/// `(L_A f)(y) + b(y)·∇f(y)` where
/// `L_A f(y) = ½ ∫ [f(y+Az) + f(y-Az) - 2f(y)] ν_L(dz)`
/// (the symmetrized principal value, exactly equal to it because `ν_L` is
/// symmetric), evaluated through the subordinator mixture.
pub fn generator_apply(
    model: &SdeModel,
    spec: &SubordinatorSpec,
    f: &TestFunction,
    y: &DVector<f64>,
    opts: MixtureOptions,
) -> Result<f64> {
    let f_y = f.eval(y);
    let jump_part = subordinate_mixture_integral(
        spec,
        |s| {
            let (value, unc) = f
                .gaussian_mean_pair(y, s, model.a(), opts.hermite_order)
                .expect("dimension validated");
            (value - f_y, unc)
        },
        opts,
    )?;
    Ok(jump_part + model.drift(y).dot(&f.grad(y)))
}

/// Options for the weak Fokker-Planck residual estimator.
#[derive(Debug, Clone, Copy)]
pub struct FpOptions {
    pub jump_cut: f64,
    pub dt_max: f64,
    /// Paths used for the generator-side average (a same-seed subsample).
    pub generator_paths: usize,
    pub mixture: MixtureOptions,
}

impl FpOptions {
    pub fn for_horizon(t: f64) -> Self {
        Self {
            jump_cut: DEFAULT_JUMP_CUT,
            dt_max: t / 256.0,
            generator_paths: 2_000,
            mixture: MixtureOptions::default(),
        }
    }
}

/// Outcome of the weak Fokker-Planck residual test.
#[derive(Debug, Clone, Copy)]
pub struct FpReport {
    /// `|d/dt E f - E[(L_A f + b·∇f)(X_t)]|` (central difference in time).
    pub residual: f64,
    /// `dt² bias + Monte Carlo σ + clock-truncation bias`.
    pub budget: f64,
    pub time_derivative: f64,
    pub generator_mean: f64,
    pub mc_sigma: f64,
    pub dt_bias: f64,
    pub truncation_bias: f64,
    pub n_paths: usize,
}

impl FpReport {
    pub fn passes(&self) -> bool {
        self.residual <= self.budget
    }
}

/// Weak Fokker-Planck residual with common random numbers across the probe
/// times `t ± dt` (plus `t ± 2dt` for the curvature estimate).
///
/// For zero-drift models with a smoothed test function the Brownian layer is
/// integrated out exactly: only clock paths are sampled, the semigroup reads
/// `E f(X_u) = E smoothed(x0, S_u)`, and the generator average uses the
/// semigroup identity `E[smoothed(X_t, s)] = smoothed(x0, S_t + s)`.
pub fn fokker_planck_residual(
    model: &SdeModel,
    spec: &SubordinatorSpec,
    f: &TestFunction,
    x0: &DVector<f64>,
    t: f64,
    dt: f64,
    n_paths: usize,
    root_seed: u64,
    opts: &FpOptions,
) -> Result<FpReport> {
    if !(dt > 0.0 && 2.0 * dt < t) {
        return Err(Error::invalid("dt", "need 0 < dt < t/2"));
    }
    if n_paths == 0 {
        return Err(Error::invalid("n_paths", "need at least one path"));
    }
    let n_gen = opts.generator_paths.min(n_paths).max(1);
    let horizon = t + 2.0 * dt;
    let probes = [t - 2.0 * dt, t - dt, t, t + dt, t + 2.0 * dt];

    let conditioned = model.drift_is_zero() && f.has_smoothed();
    // per path: (time difference, third-difference sample, generator carrier)
    struct PathOut {
        td: f64,
        d3: f64,
        mid: MidState,
    }
    enum MidState {
        Clock(f64),
        State(DVector<f64>),
        None,
    }
    let outs: Vec<PathOut> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(root_seed, path_stream(0, i as u64));
            if conditioned {
                let clock = spec.sample_path(horizon, opts.jump_cut, &mut rng)?;
                let sm: Vec<f64> = probes
                    .iter()
                    .map(|&u| {
                        f.gaussian_mean(x0, clock.value_at(u), model.a(), opts.mixture.hermite_order)
                    })
                    .collect::<Result<_>>()?;
                Ok(PathOut {
                    td: (sm[3] - sm[1]) / (2.0 * dt),
                    d3: (sm[4] - 2.0 * sm[3] + 2.0 * sm[1] - sm[0]) / (2.0 * dt * dt * dt),
                    mid: if (i as usize) < n_gen {
                        MidState::Clock(clock.value_at(t))
                    } else {
                        MidState::None
                    },
                })
            } else {
                let clock = spec.sample_path(horizon, opts.jump_cut, &mut rng)?;
                let noise = synthesize_noise_with_times(
                    &clock,
                    model.dim(),
                    opts.dt_max,
                    &probes,
                    &mut rng,
                )?;
                let states = integrate_sampled(model, &noise, x0, &probes)?;
                let vals: Vec<f64> = states.iter().map(|x| f.eval(x)).collect();
                Ok(PathOut {
                    td: (vals[3] - vals[1]) / (2.0 * dt),
                    d3: (vals[4] - 2.0 * vals[3] + 2.0 * vals[1] - vals[0])
                        / (2.0 * dt * dt * dt),
                    mid: if (i as usize) < n_gen {
                        MidState::State(states[2].clone())
                    } else {
                        MidState::None
                    },
                })
            }
        })
        .collect::<Result<_>>()?;

    let n = n_paths as f64;
    let td_mean = outs.iter().map(|o| o.td).sum::<f64>() / n;
    let td_var = outs.iter().map(|o| (o.td - td_mean).powi(2)).sum::<f64>() / n;
    let d3_mean = outs.iter().map(|o| o.d3).sum::<f64>() / n;

    // generator side on the subsample, conditioned when possible
    let gen_vals: Vec<f64> = outs[..n_gen]
        .par_iter()
        .map(|o| match &o.mid {
            MidState::Clock(s_t) => {
                let base = f.gaussian_mean(x0, *s_t, model.a(), opts.mixture.hermite_order)?;
                subordinate_mixture_integral(
                    spec,
                    |s| {
                        let (value, unc) = f
                            .gaussian_mean_pair(x0, s_t + s, model.a(), opts.mixture.hermite_order)
                            .expect("dimension validated");
                        (value - base, unc)
                    },
                    opts.mixture,
                )
            }
            MidState::State(x_t) => generator_apply(model, spec, f, x_t, opts.mixture),
            MidState::None => unreachable!("generator subsample indexes the prefix"),
        })
        .collect::<Result<_>>()?;
    let m = gen_vals.len() as f64;
    let gen_mean = gen_vals.iter().sum::<f64>() / m;
    let gen_var = gen_vals.iter().map(|g| (g - gen_mean).powi(2)).sum::<f64>() / m;

    let mc_sigma = (td_var / n + gen_var / m).sqrt();
    let dt_bias = dt * dt * d3_mean.abs() / 6.0;

    // truncation bias: ½ · t · ∫_0^ε u² ν(du) · |curvature of the semigroup
    // in the clock variable| (probed at the median realized clock)
    let mut clocks: Vec<f64> = outs
        .iter()
        .take(n_gen)
        .filter_map(|o| match &o.mid {
            MidState::Clock(s) => Some(*s),
            _ => None,
        })
        .collect();
    let curvature = if clocks.is_empty() {
        // generic path: second difference of f along the noise columns at x0
        let h = 1e-3;
        let mut acc = 0.0;
        for j in 0..model.dim() {
            let col = DVector::from(model.a().column(j).into_owned());
            if col.norm() == 0.0 {
                continue;
            }
            let plus = f.eval(&(x0 + h * &col));
            let minus = f.eval(&(x0 - h * &col));
            acc += (plus - 2.0 * f.eval(x0) + minus) / (h * h);
        }
        acc.abs()
    } else {
        let s_med = median_inplace(&mut clocks).max(1e-8);
        let delta = 0.05 * s_med;
        let at = |s: f64| {
            f.gaussian_mean(x0, s, model.a(), opts.mixture.hermite_order)
                .unwrap_or(0.0)
        };
        ((at(s_med + delta) - 2.0 * at(s_med) + at(s_med - delta)) / (delta * delta)).abs()
    };
    let truncation_bias = 0.5 * t * spec.truncated_second_moment(opts.jump_cut)? * curvature;

    Ok(FpReport {
        residual: (td_mean - gen_mean).abs(),
        budget: dt_bias + mc_sigma + truncation_bias,
        time_derivative: td_mean,
        generator_mean: gen_mean,
        mc_sigma,
        dt_bias,
        truncation_bias,
        n_paths,
    })
}

/// Mardia's multivariate normality statistics with p-values.
#[derive(Debug, Clone, Copy)]
pub struct MardiaReport {
    pub skewness: f64,
    pub skewness_p: f64,
    pub kurtosis: f64,
    pub kurtosis_p: f64,
}

/// Mardia's skewness/kurtosis test of multivariate normality.
pub fn mardia_test(samples: &[DVector<f64>]) -> Result<MardiaReport> {
    let n = samples.len();
    if n < 20 {
        return Err(Error::invalid("samples", "need at least 20 samples"));
    }
    let d = samples[0].len();
    let nf = n as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |acc, x| acc + x) / nf;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for x in samples {
        let c = x - &mean;
        cov += &c * c.transpose();
    }
    cov /= nf;
    let inv = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::invalid("samples", "degenerate sample covariance"))?
        .inverse();
    let centered: Vec<DVector<f64>> = samples.iter().map(|x| x - &mean).collect();
    let whitened: Vec<DVector<f64>> = centered.iter().map(|c| &inv * c).collect();

    let mut b1 = 0.0;
    for (c_i, _) in centered.iter().zip(0..) {
        for w_j in &whitened {
            let dot = c_i.dot(w_j);
            b1 += dot * dot * dot;
        }
    }
    b1 /= nf * nf;
    let skew_stat = nf * b1 / 6.0;
    let skew_df = (d * (d + 1) * (d + 2)) as f64 / 6.0;
    let chi = ChiSquared::new(skew_df).expect("positive dof");
    let skewness_p = 1.0 - chi.cdf(skew_stat);

    let b2 = centered
        .iter()
        .zip(whitened.iter())
        .map(|(c, w)| {
            let q = c.dot(w);
            q * q
        })
        .sum::<f64>()
        / nf;
    let dd = d as f64;
    let kurt_z = (b2 - dd * (dd + 2.0)) / (8.0 * dd * (dd + 2.0) / nf).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let kurtosis_p = 2.0 * (1.0 - normal.cdf(kurt_z.abs()));

    Ok(MardiaReport {
        skewness: skew_stat,
        skewness_p,
        kurtosis: kurt_z,
        kurtosis_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use crate::oracles::stable_calibration;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn c_l_half() -> f64 {
        (2.0 * std::f64::consts::PI).sqrt()
    }

    fn point_ensemble(points: Vec<DVector<f64>>) -> SampleEnsemble {
        let n = points.len();
        SampleEnsemble {
            samples: points,
            meta: EnsembleMeta {
                model_id: "test".into(),
                spec_id: "test".into(),
                t: 1.0,
                seed: 0,
                n,
                jump_cut: DEFAULT_JUMP_CUT,
            },
        }
    }

    #[test]
    fn cf_exact_on_point_mass() {
        let x = DVector::from_vec(vec![0.3, -1.1]);
        let ensemble = point_ensemble(vec![x.clone(); 50]);
        let z = DVector::from_vec(vec![1.2, 0.4]);
        let est = empirical_cf(&ensemble, &z);
        let phase = z.dot(&x);
        assert_relative_eq!(est.value.re, phase.cos(), epsilon = 1e-14);
        assert_relative_eq!(est.value.im, phase.sin(), epsilon = 1e-14);
        assert!(est.std_error < 1e-7);
        let zero = empirical_cf(&ensemble, &DVector::zeros(2));
        assert_eq!(zero.value, Complex::new(1.0, 0.0));
    }

    #[test]
    fn cf_bounds_hold() {
        let mut rng = crate::seeding::stream_rng(1, 0);
        let points: Vec<DVector<f64>> = (0..500)
            .map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>() * 4.0 - 2.0))
            .collect();
        let ensemble = point_ensemble(points);
        for k in 0..10 {
            let z = DVector::from_vec(vec![k as f64 * 0.7 - 3.0, 1.3]);
            let est = empirical_cf(&ensemble, &z);
            assert!(est.value.norm() <= 1.0 + 1e-12);
            assert!(est.std_error <= 1.0 / (500f64).sqrt() + 1e-12);
            let conj = empirical_cf(&ensemble, &(-&z));
            assert_relative_eq!(conj.value.re, est.value.re, epsilon = 1e-13);
            assert_relative_eq!(conj.value.im, -est.value.im, epsilon = 1e-13);
        }
    }

    #[test]
    fn kde_single_sample_is_kernel_bump() {
        let ensemble = point_ensemble(vec![DVector::from_vec(vec![0.0])]);
        let h = DVector::from_vec(vec![0.5]);
        let grid: Vec<DVector<f64>> = (-10..=10)
            .map(|k| DVector::from_vec(vec![k as f64 * 0.1]))
            .collect();
        let dens = kde_density(&ensemble, &grid, &h).unwrap();
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 0.5);
        assert_relative_eq!(dens[10], norm, epsilon = 1e-12);
        assert_relative_eq!(dens[15], norm * (-0.5_f64).exp(), epsilon = 1e-12);
        // mass on a wide grid
        let wide: Vec<DVector<f64>> = (-600..=600)
            .map(|k| DVector::from_vec(vec![k as f64 * 0.01]))
            .collect();
        let wd = kde_density(&ensemble, &wide, &h).unwrap();
        let mass: f64 = wd.iter().sum::<f64>() * 0.01;
        assert!((mass - 1.0).abs() < 0.01, "mass {mass}");
    }

    #[test]
    fn generator_constant_and_linear() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let model = models::pendulum().unwrap();
        let y = DVector::from_vec(vec![0.4, -0.2]);
        let c = TestFunction::constant(3.5);
        assert_relative_eq!(
            generator_apply(&model, &spec, &c, &y, MixtureOptions::default()).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let w = DVector::from_vec(vec![2.0, -1.0]);
        let lin = TestFunction::linear(w.clone());
        let got = generator_apply(&model, &spec, &lin, &y, MixtureOptions::default()).unwrap();
        assert_relative_eq!(got, model.drift(&y).dot(&w), epsilon = 1e-10);
    }

    #[test]
    fn generator_cosine_closed_form() {
        // b = 0, A = I: L_A cos(z·)(0) = -c_L |z|^{2β}
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        for dim in [1usize, 2] {
            let model = models::zero_drift(dim, DMatrix::identity(dim, dim)).unwrap();
            for scale in [0.5, 1.0, 2.0] {
                let mut z = DVector::zeros(dim);
                z[0] = scale;
                let f = TestFunction::cosine(z);
                let got = generator_apply(
                    &model,
                    &spec,
                    &f,
                    &DVector::zeros(dim),
                    MixtureOptions::default(),
                )
                .unwrap();
                let want = -c_l_half() * scale;
                assert!(
                    (got - want).abs() <= 1e-3 * want.abs(),
                    "dim {dim} |z| {scale}: got {got}, want {want}"
                );
            }
        }
    }

    #[test]
    fn generator_generic_matches_smoothed_cosine() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let model = models::pendulum().unwrap();
        let y = DVector::from_vec(vec![0.2, 0.5]);
        let z = DVector::from_vec(vec![0.7, -0.4]);
        let smoothed = TestFunction::cosine(z.clone());
        let z2 = z.clone();
        let generic = TestFunction::new(
            Arc::new(move |x: &DVector<f64>| z.dot(x).cos()),
            Arc::new(move |x: &DVector<f64>| -z2.dot(x).sin() * &z2),
        );
        let a = generator_apply(&model, &spec, &smoothed, &y, MixtureOptions::default())
            .unwrap();
        let b = generator_apply(&model, &spec, &generic, &y, MixtureOptions::default()).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-5);
    }

    #[test]
    fn generator_generic_bump_needs_loose_tolerance() {
        // Without a closed smoothing form, cubature cannot certify the slow
        // mixture tail of a narrow bump at tight tolerance; it can at 1%.
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let model = models::pendulum().unwrap();
        let y = DVector::from_vec(vec![0.2, 0.5]);
        let smoothed = TestFunction::gaussian_bump(DVector::from_vec(vec![0.5, 0.0]), 0.8)
            .unwrap();
        let m = DVector::from_vec(vec![0.5, 0.0]);
        let m2 = m.clone();
        let generic = TestFunction::new(
            Arc::new(move |x: &DVector<f64>| (-(x - &m).norm_squared() / 1.28).exp()),
            Arc::new(move |x: &DVector<f64>| {
                let diff = x - &m2;
                (-diff.norm_squared() / 1.28).exp() / 0.64 * (-diff)
            }),
        );
        assert!(
            generator_apply(&model, &spec, &generic, &y, MixtureOptions::default()).is_err()
        );
        let loose = MixtureOptions {
            rel_tol: 5e-2,
            ..MixtureOptions::default()
        };
        let a = generator_apply(&model, &spec, &smoothed, &y, MixtureOptions::default())
            .unwrap();
        let b = generator_apply(&model, &spec, &generic, &y, loose).unwrap();
        assert_relative_eq!(a, b, max_relative = 5e-2);
    }

    #[test]
    fn fp_residual_zero_drift_within_budget() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let model = models::zero_drift(1, DMatrix::identity(1, 1)).unwrap();
        let cal = stable_calibration(&spec).unwrap();
        // pick |z| so c_L|z| ≈ 0.6, near the optimum of signal vs noise
        let z = 0.6 / cal.c_l;
        let f = TestFunction::cosine(DVector::from_vec(vec![z]));
        let report = fokker_planck_residual(
            &model,
            &spec,
            &f,
            &DVector::zeros(1),
            1.0,
            0.01,
            20_000,
            515,
            &FpOptions::for_horizon(1.0),
        )
        .unwrap();
        let analytic = -cal.c_l * z * (-(cal.c_l) * z).exp();
        assert!(
            (report.time_derivative - analytic).abs() <= 4.0 * report.mc_sigma + report.dt_bias,
            "time derivative {} vs analytic {analytic}",
            report.time_derivative
        );
        assert!(
            report.passes(),
            "residual {} > budget {}",
            report.residual,
            report.budget
        );
    }

    #[test]
    fn fp_residual_rejects_bad_dt() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let model = models::zero_drift(1, DMatrix::identity(1, 1)).unwrap();
        let f = TestFunction::cosine(DVector::from_vec(vec![1.0]));
        assert!(fokker_planck_residual(
            &model,
            &spec,
            &f,
            &DVector::zeros(1),
            1.0,
            0.6,
            100,
            0,
            &FpOptions::for_horizon(1.0)
        )
        .is_err());
    }

    #[test]
    fn mardia_accepts_gaussian_rejects_skewed() {
        let mut rng = crate::seeding::stream_rng(7, 0);
        let gauss: Vec<DVector<f64>> = (0..2000)
            .map(|_| {
                DVector::from_fn(2, |_, _| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
            })
            .collect();
        let report = mardia_test(&gauss).unwrap();
        assert!(report.skewness_p > 0.01, "skewness p {}", report.skewness_p);
        assert!(report.kurtosis_p > 0.01, "kurtosis p {}", report.kurtosis_p);

        let skewed: Vec<DVector<f64>> = gauss
            .iter()
            .map(|x| DVector::from_vec(vec![x[0].exp(), x[1]]))
            .collect();
        let report = mardia_test(&skewed).unwrap();
        assert!(report.skewness_p < 1e-6);
    }

    #[test]
    fn ensemble_simulation_deterministic() {
        let spec = SubordinatorSpec::stable(0.5, 1.0).unwrap();
        let model = models::kinetic_linear().unwrap();
        let opts = SimOptions {
            dt_max: 0.25,
            ..SimOptions::for_horizon(1.0)
        };
        let a = simulate_ensemble(&model, &spec, &DVector::zeros(2), 1.0, 64, 9, opts).unwrap();
        let b = simulate_ensemble(&model, &spec, &DVector::zeros(2), 1.0, 64, 9, opts).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x, y);
        }
    }
}
