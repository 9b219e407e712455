//! Driving-noise synthesis: `L_t = W_{S_t}` conditional on a realized clock
//! path.
//!
//! The architecture follows the product-space viewpoint: the clock `ℓ` is
//! sampled first, then the Brownian layer given `ℓ`. The grid is the union of
//! every clock jump time and a uniform refinement mesh; each cell carries an
//! increment that is Gaussian with covariance (clock increase over the cell)
//! times the identity, conditionally on the clock. Increments are attached to
//! the cell's right endpoint (càdlàg convention).

use std::io::Write;

use nalgebra::{Complex, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seeding::{path_stream, stream_rng};
use crate::subordinator::{SubordinatorPath, SubordinatorSpec};

/// A clock jump carried by a grid cell, together with the Brownian increment
/// accrued over that jump.
#[derive(Debug, Clone)]
pub struct NoiseJump {
    pub clock_size: f64,
    pub increment: DVector<f64>,
}

/// One grid cell `(t_{k-1}, t_k]` of the driving noise.
#[derive(Debug, Clone)]
pub struct NoiseCell {
    /// Clock increase from the drift surrogate, `r_ε · Δt`.
    pub drift_clock: f64,
    /// Brownian increment over the drift part, `N(0, drift_clock · I)`.
    pub drift_increment: DVector<f64>,
    /// Clock jump attached to the cell's right endpoint, if any.
    pub jump: Option<NoiseJump>,
}

impl NoiseCell {
    /// Total clock increase over the cell.
    pub fn clock(&self) -> f64 {
        self.drift_clock + self.jump.as_ref().map_or(0.0, |j| j.clock_size)
    }

    /// Total noise increment over the cell (drift part plus jump part).
    pub fn increment(&self) -> DVector<f64> {
        match &self.jump {
            Some(j) => &self.drift_increment + &j.increment,
            None => self.drift_increment.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GridTag {
    Mesh(usize),
    Jump,
    Extra,
}

/// Synthesized driving noise on a grid aligned with the clock jumps.
#[derive(Debug, Clone)]
pub struct DrivingNoisePath {
    dim: usize,
    times: Vec<f64>,
    tags: Vec<GridTag>,
    cells: Vec<NoiseCell>,
    drift_rate: f64,
    cut: f64,
    truncation_var_rate: f64,
    mesh_cells: usize,
}

impl DrivingNoisePath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Grid times `0 = u_0 < … < u_m = T`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn cells(&self) -> &[NoiseCell] {
        &self.cells
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn drift_rate(&self) -> f64 {
        self.drift_rate
    }

    pub fn cut(&self) -> f64 {
        self.cut
    }

    /// Per-unit-time variance of the clock fluctuation dropped by the
    /// sub-`cut` truncation, forwarded from the clock path.
    pub fn truncation_var_rate(&self) -> f64 {
        self.truncation_var_rate
    }

    /// Terminal clock value `S_T` implied by the cells.
    pub fn terminal_clock(&self) -> f64 {
        self.cells.iter().map(NoiseCell::clock).sum()
    }

    /// Terminal noise value `L_T`.
    pub fn total_increment(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for cell in &self.cells {
            acc += cell.increment();
        }
        acc
    }

    /// Merge uniform-mesh cells by `factor`, keeping jump and extra times.
    ///
    /// The merged path is the same realized noise viewed on a coarser grid:
    /// increments and clock increases add exactly. The number of mesh cells
    /// must be divisible by `factor`.
    pub fn coarsen(&self, factor: usize) -> DrivingNoisePath {
        assert!(factor >= 1);
        assert!(
            self.mesh_cells % factor == 0,
            "mesh cell count {} not divisible by {factor}",
            self.mesh_cells
        );
        let keep = |tag: GridTag| match tag {
            GridTag::Mesh(k) => k % factor == 0,
            GridTag::Jump | GridTag::Extra => true,
        };
        let mut times = vec![self.times[0]];
        let mut tags = vec![self.tags[0]];
        let mut cells: Vec<NoiseCell> = Vec::new();
        let mut pending: Option<NoiseCell> = None;
        for (idx, cell) in self.cells.iter().enumerate() {
            let merged = match pending.take() {
                Some(mut acc) => {
                    acc.drift_clock += cell.drift_clock;
                    acc.drift_increment += &cell.drift_increment;
                    debug_assert!(acc.jump.is_none());
                    acc.jump = cell.jump.clone();
                    acc
                }
                None => cell.clone(),
            };
            let right_tag = self.tags[idx + 1];
            if keep(right_tag) {
                times.push(self.times[idx + 1]);
                tags.push(right_tag);
                cells.push(merged);
            } else {
                pending = Some(merged);
            }
        }
        assert!(pending.is_none(), "terminal grid point must be kept");
        DrivingNoisePath {
            dim: self.dim,
            times,
            tags,
            cells,
            drift_rate: self.drift_rate,
            cut: self.cut,
            truncation_var_rate: self.truncation_var_rate,
            mesh_cells: self.mesh_cells / factor,
        }
    }

    /// CSV rows `time,dl_0,…,dl_{d-1},jump_flag` (header included).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "time")?;
        for j in 0..self.dim {
            write!(out, ",dl_{j}")?;
        }
        writeln!(out, ",jump_flag")?;
        for (idx, cell) in self.cells.iter().enumerate() {
            write!(out, "{:.17e}", self.times[idx + 1])?;
            let inc = cell.increment();
            for j in 0..self.dim {
                write!(out, ",{:.17e}", inc[j])?;
            }
            writeln!(out, ",{}", u8::from(cell.jump.is_some()))?;
        }
        Ok(())
    }
}

/// Synthesize the driving noise for a clock path on a grid with uniform mesh
/// step at most `dt_max`, refined by all clock jump times.
pub fn synthesize_noise(
    path: &SubordinatorPath,
    dim: usize,
    dt_max: f64,
    rng: &mut impl Rng,
) -> Result<DrivingNoisePath> {
    synthesize_noise_with_times(path, dim, dt_max, &[], rng)
}

/// As [`synthesize_noise`], forcing `extra_times` into the grid (useful when
/// downstream estimators must read the path at exact probe times).
pub fn synthesize_noise_with_times(
    path: &SubordinatorPath,
    dim: usize,
    dt_max: f64,
    extra_times: &[f64],
    rng: &mut impl Rng,
) -> Result<DrivingNoisePath> {
    if dim == 0 {
        return Err(Error::invalid("dim", "dimension must be at least 1"));
    }
    if !(dt_max > 0.0) {
        return Err(Error::invalid("dt_max", "refinement bound must be positive"));
    }
    let horizon = path.horizon();
    let mut points: Vec<(f64, GridTag)> = Vec::new();
    let mesh_cells = if horizon > 0.0 {
        let n = (horizon / dt_max).ceil().max(1.0) as usize;
        for k in 0..=n {
            points.push((horizon * k as f64 / n as f64, GridTag::Mesh(k)));
        }
        n
    } else {
        points.push((0.0, GridTag::Mesh(0)));
        0
    };
    for (t, _) in path.jumps() {
        points.push((*t, GridTag::Jump));
    }
    for &t in extra_times {
        if !(t >= 0.0 && t <= horizon) {
            return Err(Error::invalid(
                "extra_times",
                format!("{t} outside [0, {horizon}]"),
            ));
        }
        points.push((t, GridTag::Extra));
    }
    // Jump > Extra > Mesh on exact time collisions.
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| tag_rank(a.1).cmp(&tag_rank(b.1))));
    let mut times: Vec<f64> = Vec::with_capacity(points.len());
    let mut tags: Vec<GridTag> = Vec::with_capacity(points.len());
    for (t, tag) in points {
        if times.last() == Some(&t) {
            continue; // first occurrence has the strongest tag
        }
        times.push(t);
        tags.push(tag);
    }

    let mut jump_iter = path.jumps().iter().peekable();
    let drift_rate = path.drift_rate();
    let mut cells = Vec::with_capacity(times.len().saturating_sub(1));
    for k in 1..times.len() {
        let dt = times[k] - times[k - 1];
        let drift_clock = drift_rate * dt;
        let sd = drift_clock.sqrt();
        let drift_increment = DVector::from_fn(dim, |_, _| {
            sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        let jump = match jump_iter.peek() {
            Some((tj, ds)) if *tj == times[k] => {
                jump_iter.next();
                let jsd = ds.sqrt();
                Some(NoiseJump {
                    clock_size: *ds,
                    increment: DVector::from_fn(dim, |_, _| {
                        jsd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                    }),
                })
            }
            _ => None,
        };
        cells.push(NoiseCell {
            drift_clock,
            drift_increment,
            jump,
        });
    }
    debug_assert!(jump_iter.next().is_none(), "every jump time must be a grid point");
    Ok(DrivingNoisePath {
        dim,
        times,
        tags,
        cells,
        drift_rate,
        cut: path.cut(),
        truncation_var_rate: path.truncation_var_rate(),
        mesh_cells,
    })
}

fn tag_rank(tag: GridTag) -> u8 {
    match tag {
        GridTag::Jump => 0,
        GridTag::Extra => 1,
        GridTag::Mesh(_) => 2,
    }
}

/// Bound on `|CF of truncated-clock noise − CF of exact noise|` at a probe
/// whose conditional Gaussian exponent is `gaussian_arg = |A* z|`:
/// `t · (|A* z|²/2)² · ∫_0^ε u² ν(du) / 2`.
pub fn truncation_cf_bias(
    spec: &SubordinatorSpec,
    eps: f64,
    t: f64,
    gaussian_arg: f64,
) -> Result<f64> {
    let s = 0.5 * gaussian_arg * gaussian_arg;
    Ok(0.5 * t * s * s * spec.truncated_second_moment(eps)?)
}

/// Empirical characteristic function `N^{-1} Σ e^{i z·x}` of a sample batch.
pub(crate) fn cf_mean(samples: &[DVector<f64>], z: &DVector<f64>) -> Complex<f64> {
    let mut acc = Complex::new(0.0, 0.0);
    for x in samples {
        let phase = z.dot(x);
        acc += Complex::new(phase.cos(), phase.sin());
    }
    acc / samples.len() as f64
}

/// Report of the compound-Poisson decomposition check.
#[derive(Debug, Clone)]
pub struct DecompositionReport {
    /// `max_z |CF_full(z) − CF_split(z)|`.
    pub max_discrepancy: f64,
    /// Per-probe rows `(z, CF_full, CF_split)`.
    pub rows: Vec<(DVector<f64>, Complex<f64>, Complex<f64>)>,
    pub n_paths: usize,
}

/// Verify the distributional identity `W_{S_t} ≐ W_{S'_t} + H_t` where `S'`
/// keeps only jumps `< 1` and `H` is an independent compound Poisson sum of
/// Gaussian-mixture displacements with rate `λ = ν_S([1, ∞))`.
///
/// Both sides are simulated (`n_paths` each, disjoint seed streams) and the
/// maximum empirical characteristic-function discrepancy over `z_grid` is
/// returned.
pub fn verify_decomposition(
    spec: &SubordinatorSpec,
    dim: usize,
    horizon: f64,
    z_grid: &[DVector<f64>],
    n_paths: usize,
    root_seed: u64,
) -> Result<DecompositionReport> {
    if n_paths < 1_000 {
        return Err(Error::invalid("n_paths", "need at least 10^3 paths"));
    }
    let cut = crate::subordinator::DEFAULT_JUMP_CUT;
    let lambda = spec.big_jump_rate()?;

    let full: Vec<DVector<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(root_seed, path_stream(0, i as u64));
            let path = spec.sample_path(horizon, cut, &mut rng)?;
            let sd = path.total().sqrt();
            Ok(DVector::from_fn(dim, |_, _| {
                sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            }))
        })
        .collect::<Result<_>>()?;

    let split: Vec<DVector<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(root_seed, path_stream(1, i as u64));
            let path = spec.sample_path(horizon, cut, &mut rng)?;
            let small = path.truncate_jumps_above(1.0);
            let sd = small.total().sqrt();
            let mut x = DVector::from_fn(dim, |_, _| {
                sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            let n_big = if horizon > 0.0 {
                rand_distr::Poisson::new(lambda * horizon)
                    .map_err(|e| Error::invalid("horizon", format!("bad Poisson mean: {e}")))?
                    .sample(&mut rng) as usize
            } else {
                0
            };
            for _ in 0..n_big {
                x += spec.sample_big_jump_displacement(dim, &mut rng)?;
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(z_grid.len());
    let mut max_disc = 0.0_f64;
    for z in z_grid {
        let cf_full = cf_mean(&full, z);
        let cf_split = cf_mean(&split, z);
        max_disc = max_disc.max((cf_full - cf_split).norm());
        rows.push((z.clone(), cf_full, cf_split));
    }
    Ok(DecompositionReport {
        max_discrepancy: max_disc,
        rows,
        n_paths,
    })
}
