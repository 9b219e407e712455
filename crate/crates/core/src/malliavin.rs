//! The Malliavin covariance matrix of the conditioned flow and its
//! non-degeneracy statistics.
//!
//! For a fixed clock path the covariance at time `t` is
//! `Σ_t = J_t ( ∫_0^t K_s A A* K_s* dS_s ) J_t*`,
//! assembled here as the jump sum `Σ_{s≤t} K_s AA* K_s* ΔS_s` plus the
//! drift-clock part `r_ε ∫_0^t K_s AA* K_s* ds` on the integrator mesh.
//! Invertibility of the inner (reduced) matrix along directions `a` is what
//! drives the existence of a density, so the directional energy
//! `∫_0^t |a K_s A|² dS_s` and its small-ball statistics are exposed
//! alongside.

use std::io::Write;

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{integrate, SdeModel, TrajectoryBundle};
use crate::linalg::min_symmetric_eigenvalue;
use crate::noise::synthesize_noise;
use crate::seeding::{path_stream, stream_rng};
use crate::subordinator::{SubordinatorSpec, DEFAULT_JUMP_CUT};

/// The Malliavin covariance `Σ_t` and its reduced form
/// `C_t = ∫_0^t K_s AA* K_s* dS_s` with `Σ_t = J_t C_t J_t*`.
#[derive(Debug, Clone)]
pub struct MalliavinCovariance {
    pub t: f64,
    pub sigma: DMatrix<f64>,
    pub reduced: DMatrix<f64>,
}

impl MalliavinCovariance {
    pub fn min_eigenvalue(&self) -> f64 {
        min_symmetric_eigenvalue(&self.sigma)
    }
}

/// Assemble the covariance at time `t` (snapped to the last grid time `≤ t`).
pub fn covariance(
    model: &SdeModel,
    bundle: &TrajectoryBundle,
    t: f64,
) -> Result<MalliavinCovariance> {
    let idx = bundle.index_at(t)?;
    let d = model.dim();
    let aat = model.a() * model.a().transpose();
    let kernel = |k_mat: &DMatrix<f64>| k_mat * &aat * k_mat.transpose();

    let mut reduced = DMatrix::<f64>::zeros(d, d);
    // drift-clock part by the trapezoid rule on the integrator mesh
    let r = bundle.drift_rate();
    if r > 0.0 {
        let mut left = kernel(&bundle.inverse_jacobians()[0]);
        for k in 1..=idx {
            let dt = bundle.times()[k] - bundle.times()[k - 1];
            let right = kernel(&bundle.inverse_jacobians()[k]);
            reduced += (0.5 * r * dt) * (&left + &right);
            left = right;
        }
    }
    // jump part
    for ev in bundle.jump_log() {
        if ev.grid_index > idx {
            break;
        }
        reduced += ev.clock_size * kernel(&bundle.inverse_jacobians()[ev.grid_index]);
    }
    let j = &bundle.jacobians()[idx];
    let sigma = j * &reduced * j.transpose();
    Ok(MalliavinCovariance {
        t: bundle.times()[idx],
        sigma,
        reduced,
    })
}

/// Directional energy `∫_0^t |a K_s A|² dS_s` for a unit row vector `a`.
/// Equals `a C_t a*` by construction (same mesh and weights).
pub fn directional_energy(
    model: &SdeModel,
    bundle: &TrajectoryBundle,
    a: &RowDVector<f64>,
    t: f64,
) -> Result<f64> {
    if (a.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::invalid("a", "direction must be a unit row vector"));
    }
    let idx = bundle.index_at(t)?;
    let energy_at = |k_mat: &DMatrix<f64>| -> f64 {
        let row = a * k_mat * model.a();
        row.norm_squared()
    };
    let mut total = 0.0;
    let r = bundle.drift_rate();
    if r > 0.0 {
        let mut left = energy_at(&bundle.inverse_jacobians()[0]);
        for k in 1..=idx {
            let dt = bundle.times()[k] - bundle.times()[k - 1];
            let right = energy_at(&bundle.inverse_jacobians()[k]);
            total += 0.5 * r * dt * (left + right);
            left = right;
        }
    }
    for ev in bundle.jump_log() {
        if ev.grid_index > idx {
            break;
        }
        total += ev.clock_size * energy_at(&bundle.inverse_jacobians()[ev.grid_index]);
    }
    Ok(total)
}

/// Options for [`small_ball_profile`].
#[derive(Debug, Clone, Copy)]
pub struct SmallBallOptions {
    /// Small-jump truncation for the sampled clocks.
    pub jump_cut: f64,
    /// Mesh bound for the noise grid.
    pub dt_max: f64,
    /// Normal quantile for the confidence bands (2.5758 ≈ 99%).
    pub confidence_z: f64,
}

impl SmallBallOptions {
    pub fn for_horizon(t: f64) -> Self {
        Self {
            jump_cut: DEFAULT_JUMP_CUT,
            dt_max: t / 256.0,
            confidence_z: 2.575_829_303_548_9,
        }
    }
}

/// One cell of the small-ball table.
#[derive(Debug, Clone)]
pub struct SmallBallRow {
    pub a_index: usize,
    pub eps: f64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub hits: usize,
}

/// Empirical small-ball table with Wilson confidence intervals and per-
/// direction log-log slopes.
#[derive(Debug, Clone)]
pub struct SmallBallProfile {
    pub rows: Vec<SmallBallRow>,
    /// Least-squares slope of `log p̂` against `log ε` per direction, over
    /// grid points with at least one hit (`None` with fewer than two).
    pub slopes: Vec<Option<f64>>,
    pub n_paths: usize,
}

impl SmallBallProfile {
    /// CSV rows `a_index,eps,p_hat,ci_lo,ci_hi` (header included).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "a_index,eps,p_hat,ci_lo,ci_hi")?;
        for row in &self.rows {
            writeln!(
                out,
                "{},{:.17e},{:.17e},{:.17e},{:.17e}",
                row.a_index, row.eps, row.p_hat, row.ci_lo, row.ci_hi
            )?;
        }
        Ok(())
    }
}

/// Monte Carlo estimate of `P{∫_0^t |a K_s A|² dS_s ≤ ε}` over a grid of
/// directions and levels.
pub fn small_ball_profile(
    model: &SdeModel,
    spec: &SubordinatorSpec,
    x0: &DVector<f64>,
    t: f64,
    a_grid: &[RowDVector<f64>],
    eps_grid: &[f64],
    n_paths: usize,
    root_seed: u64,
    options: SmallBallOptions,
) -> Result<SmallBallProfile> {
    if n_paths < 10_000 {
        return Err(Error::invalid("n_paths", "need at least 10^4 paths"));
    }
    if a_grid.is_empty() || eps_grid.is_empty() {
        return Err(Error::invalid("a_grid", "directions and levels must be nonempty"));
    }
    let energies: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(root_seed, path_stream(0, i as u64));
            let clock = spec.sample_path(t, options.jump_cut, &mut rng)?;
            let noise = synthesize_noise(&clock, model.dim(), options.dt_max, &mut rng)?;
            let bundle = integrate(model, &noise, x0)?;
            a_grid
                .iter()
                .map(|a| directional_energy(model, &bundle, a, t))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(a_grid.len() * eps_grid.len());
    let mut slopes = Vec::with_capacity(a_grid.len());
    let z = options.confidence_z;
    for (ai, _) in a_grid.iter().enumerate() {
        let mut points = Vec::new();
        for &eps in eps_grid {
            let hits = energies.iter().filter(|e| e[ai] <= eps).count();
            let p_hat = hits as f64 / n_paths as f64;
            let (ci_lo, ci_hi) = wilson_interval(p_hat, n_paths, z);
            if hits > 0 {
                points.push((eps.ln(), p_hat.ln()));
            }
            rows.push(SmallBallRow {
                a_index: ai,
                eps,
                p_hat,
                ci_lo,
                ci_hi,
                hits,
            });
        }
        slopes.push(fit_slope(&points));
    }
    Ok(SmallBallProfile {
        rows,
        slopes,
        n_paths,
    })
}

fn wilson_interval(p_hat: f64, n: usize, z: f64) -> (f64, f64) {
    let n = n as f64;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
