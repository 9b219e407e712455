//! Lévy measures of one-dimensional subordinators, their analytic
//! functionals, and clock-path sampling.
//!
//! A subordinator is represented by its Lévy measure `ν` on `(0, ∞)` with
//! `∫ (1 ∧ u) ν(du) < ∞`. Two kinds are supported: the `β`-stable family
//! `ν(du) = c · u^{-1-β} du` with closed-form functionals, and arbitrary
//! densities with quadrature-backed functionals.
//!
//! Clock paths are sampled by small/large jump decomposition: jumps of size
//! `≥ ε` form a compound Poisson process with rate `ν([ε, ∞))`, while jumps
//! below `ε` are replaced by their compensating drift `r_ε = ∫_0^ε u ν(du)`.
//! The neglected fluctuation has variance `t · ∫_0^ε u² ν(du)` per path and
//! is reported on the sampled path.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quad::{integrate_to_infinity, integrate_to_zero};

/// Default truncation level for small jumps. For `β ≤ 0.9` at unit intensity
/// this keeps mean jump counts manageable per unit time while making the
/// drift-approximation variance negligible against Monte Carlo noise.
pub const DEFAULT_JUMP_CUT: f64 = 1e-4;

const QUAD_TOL: f64 = 1e-10;

type DensityFn = dyn Fn(f64) -> f64 + Send + Sync;

#[derive(Clone)]
enum Kind {
    Stable { beta: f64, c: f64 },
    Custom {
        density: Arc<DensityFn>,
        envelope_beta: f64,
        envelope_c: f64,
    },
}

/// A subordinator Lévy measure with analytic helpers.
///
/// Immutable and shareable across threads; all sampling routines are pure
/// functions of `(spec, parameters, rng state)`.
#[derive(Clone)]
pub struct SubordinatorSpec {
    kind: Kind,
}

impl fmt::Debug for SubordinatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Stable { beta, c } => write!(f, "SubordinatorSpec::stable(beta={beta}, c={c})"),
            Kind::Custom {
                envelope_beta,
                envelope_c,
                ..
            } => write!(
                f,
                "SubordinatorSpec::custom(envelope_beta={envelope_beta}, envelope_c={envelope_c})"
            ),
        }
    }
}

impl SubordinatorSpec {
    /// Stable subordinator with Lévy density `c · u^{-1-β}`.
    ///
    /// Rejects `beta` outside `(0, 1)` (the small-jump first moment would
    /// diverge) and non-positive `c`.
    pub fn stable(beta: f64, c: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(
                "beta",
                format!("stable index must lie in (0, 1), got {beta}"),
            ));
        }
        if !(c > 0.0) {
            return Err(Error::invalid(
                "c",
                format!("intensity scale must be positive, got {c}"),
            ));
        }
        Ok(Self {
            kind: Kind::Stable { beta, c },
        })
    }

    /// Subordinator with an arbitrary Lévy density.
    ///
    /// `envelope_beta`, `envelope_c` describe a Pareto envelope
    /// `c_e · u^{-1-β_e}` that must dominate the density on `[cut, ∞)` for
    /// every truncation `cut` used in sampling; it drives rejection sampling.
    /// Construction checks `∫ (1 ∧ u) ν(du) < ∞` numerically and probes the
    /// envelope.
    pub fn custom(
        density: Arc<DensityFn>,
        envelope_beta: f64,
        envelope_c: f64,
    ) -> Result<Self> {
        if !(envelope_beta > 0.0 && envelope_beta < 1.0) {
            return Err(Error::invalid(
                "envelope_beta",
                "Pareto envelope index must lie in (0, 1)".to_string(),
            ));
        }
        if !(envelope_c > 0.0) {
            return Err(Error::invalid("envelope_c", "must be positive".to_string()));
        }
        // ∫_0^1 u ν(du) finite
        integrate_to_zero(|u| u * density(u), 1.0, QUAD_TOL).map_err(|e| {
            Error::invalid("density", format!("∫_0^1 u ν(du) does not converge: {e}"))
        })?;
        // ∫_1^∞ ν(du) finite
        integrate_to_infinity(|u| density(u), 1.0, QUAD_TOL).map_err(|e| {
            Error::invalid("density", format!("tail mass ν([1,∞)) does not converge: {e}"))
        })?;
        let mut probe = 1e-8_f64;
        while probe < 1e8 {
            let env = envelope_c * probe.powf(-1.0 - envelope_beta);
            if density(probe) > env * (1.0 + 1e-9) {
                return Err(Error::invalid(
                    "envelope_c",
                    format!("Pareto envelope does not dominate the density at u = {probe:e}"),
                ));
            }
            probe *= 3.7;
        }
        Ok(Self {
            kind: Kind::Custom {
                density,
                envelope_beta,
                envelope_c,
            },
        })
    }

    /// Lévy density `dν/du` at `u > 0`.
    pub fn density(&self, u: f64) -> f64 {
        match &self.kind {
            Kind::Stable { beta, c } => c * u.powf(-1.0 - beta),
            Kind::Custom { density, .. } => density(u),
        }
    }

    pub fn is_stable(&self) -> bool {
        matches!(self.kind, Kind::Stable { .. })
    }

    /// `(beta, c)` for the stable kind.
    pub fn stable_params(&self) -> Option<(f64, f64)> {
        match self.kind {
            Kind::Stable { beta, c } => Some((beta, c)),
            Kind::Custom { .. } => None,
        }
    }

    /// Truncated first moment `∫_0^eps u ν(du)`; the drift compensation rate
    /// for jumps below `eps`.
    pub fn truncated_first_moment(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::invalid("eps", "truncation level must be positive"));
        }
        match &self.kind {
            Kind::Stable { beta, c } => Ok(c * eps.powf(1.0 - beta) / (1.0 - beta)),
            Kind::Custom { density, .. } => {
                integrate_to_zero(|u| u * density(u), eps, QUAD_TOL)
            }
        }
    }

    /// Truncated second moment `∫_0^eps u² ν(du)`; the per-unit-time variance
    /// neglected when sub-`eps` jumps are replaced by drift.
    pub fn truncated_second_moment(&self, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::invalid("eps", "truncation level must be positive"));
        }
        match &self.kind {
            Kind::Stable { beta, c } => Ok(c * eps.powf(2.0 - beta) / (2.0 - beta)),
            Kind::Custom { density, .. } => {
                integrate_to_zero(|u| u * u * density(u), eps, QUAD_TOL)
            }
        }
    }

    /// Tail mass `ν([lo, ∞))`.
    pub fn tail_mass(&self, lo: f64) -> Result<f64> {
        if !(lo > 0.0) {
            return Err(Error::invalid("lo", "tail cutoff must be positive"));
        }
        match &self.kind {
            Kind::Stable { beta, c } => Ok(c / beta * lo.powf(-beta)),
            Kind::Custom { density, .. } => integrate_to_infinity(|u| density(u), lo, QUAD_TOL),
        }
    }

    /// Rate of jumps of size `≥ 1`: `λ = ν([1, ∞))`. The inter-arrival times
    /// of such jumps are exponential with this parameter.
    pub fn big_jump_rate(&self) -> Result<f64> {
        self.tail_mass(1.0)
    }

    /// Diagnostic for the small-jump scaling limit
    /// `ε^{-(1-2θ)} · ∫_0^ε u ν(du) → c_θ` along a decreasing grid.
    ///
    /// The limit is declared converged when the last three ratios agree
    /// pairwise within 1%; a divergent sequence is reported as
    /// non-converged, not as an error.
    pub fn moment_scaling_check(&self, theta: f64, eps_grid: &[f64]) -> Result<MomentScaling> {
        if !(theta > 0.0 && theta < 0.5) {
            return Err(Error::invalid("theta", "exponent must lie in (0, 1/2)"));
        }
        if eps_grid.is_empty() {
            return Err(Error::invalid("eps_grid", "grid must be nonempty"));
        }
        if eps_grid.windows(2).any(|w| w[1] >= w[0]) || eps_grid.iter().any(|&e| e <= 0.0) {
            return Err(Error::invalid(
                "eps_grid",
                "grid must be strictly decreasing and positive",
            ));
        }
        let mut ratios = Vec::with_capacity(eps_grid.len());
        for &eps in eps_grid {
            let m1 = self.truncated_first_moment(eps)?;
            ratios.push(eps.powf(-(1.0 - 2.0 * theta)) * m1);
        }
        let (converged, limit) = if ratios.len() >= 3 {
            let tail = &ratios[ratios.len() - 3..];
            let top = tail.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
            let close = tail
                .iter()
                .all(|&r| tail.iter().all(|&s| (r - s).abs() <= 0.01 * top.max(1e-300)));
            if close {
                (true, Some(tail.iter().sum::<f64>() / 3.0))
            } else {
                (false, None)
            }
        } else {
            (false, None)
        };
        Ok(MomentScaling {
            theta,
            ratios,
            limit,
            converged,
        })
    }

    /// Rate function `φ(λ) = (λ/2) ∫_0^{log2/(λ f_sup)} u ν(du)` of the
    /// exponential lower-tail bound
    /// `P{∫_0^t f dS ≤ ε, ∫_0^t f ds > δ} ≤ e^{1 - φ(1/ε) δ}`
    /// for nonnegative adapted `f` bounded by `f_sup`.
    pub fn tail_bound_exponent(&self, lambda: f64, f_sup: f64) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::invalid("lambda", "rate must be positive"));
        }
        if !(f_sup > 0.0) {
            return Err(Error::invalid("f_sup", "bound must be positive"));
        }
        let cutoff = std::f64::consts::LN_2 / (lambda * f_sup);
        Ok(0.5 * lambda * self.truncated_first_moment(cutoff)?)
    }

    /// One draw from the normalized restriction of `ν` to `[lo, ∞)`.
    pub fn sample_tail_jump(&self, lo: f64, rng: &mut impl Rng) -> Result<f64> {
        assert!(lo > 0.0);
        match &self.kind {
            Kind::Stable { beta, .. } => {
                let v: f64 = rng.random();
                Ok(lo * (1.0 - v).powf(-1.0 / beta))
            }
            Kind::Custom {
                density,
                envelope_beta,
                envelope_c,
            } => {
                // Rejection from the Pareto envelope restricted to [lo, ∞).
                for _ in 0..1_000_000 {
                    let v: f64 = rng.random();
                    let u = lo * (1.0 - v).powf(-1.0 / envelope_beta);
                    let env = envelope_c * u.powf(-1.0 - envelope_beta);
                    let accept: f64 = rng.random();
                    if accept * env <= density(u) {
                        return Ok(u);
                    }
                }
                Err(Error::Quadrature(
                    "rejection sampling from the Pareto envelope failed to accept; \
                     envelope is far from tight"
                        .to_string(),
                ))
            }
        }
    }

    /// Sample one clock path on `[0, horizon]` with truncation level `eps`.
    ///
    /// The jump count in `[eps, ∞)` is Poisson with mean
    /// `horizon · ν([eps, ∞))`; jump sizes follow the normalized restriction
    /// of `ν`; jumps below `eps` are folded into the compensating drift.
    pub fn sample_path(
        &self,
        horizon: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<SubordinatorPath> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::invalid("eps", "truncation must lie in (0, 1)"));
        }
        if !(horizon >= 0.0) {
            return Err(Error::invalid("horizon", "must be nonnegative"));
        }
        let drift_rate = self.truncated_first_moment(eps)?;
        let truncation_var_rate = self.truncated_second_moment(eps)?;
        let mut jumps: Vec<(f64, f64)> = Vec::new();
        if horizon > 0.0 {
            let mean = self.tail_mass(eps)? * horizon;
            let count = Poisson::new(mean)
                .map_err(|e| Error::invalid("horizon", format!("bad Poisson mean: {e}")))?
                .sample(rng) as usize;
            let mut times: Vec<f64> = (0..count)
                .map(|_| horizon * (1.0 - rng.random::<f64>()))
                .collect();
            times.sort_by(f64::total_cmp);
            jumps.reserve(count);
            for t in times {
                let size = self.sample_tail_jump(eps, rng)?;
                match jumps.last_mut() {
                    // Exact time collisions are merged to keep times strictly increasing.
                    Some(last) if last.0 == t => last.1 += size,
                    _ => jumps.push((t, size)),
                }
            }
        }
        Ok(SubordinatorPath {
            horizon,
            jumps,
            drift_rate,
            cut: eps,
            truncation_var_rate,
        })
    }

    /// Sample the displacement of one big jump of the driving noise: the
    /// Gaussian mixture `s ~ ν|_{[1,∞)}/λ`, then `ξ ~ N(0, s·I_d)`.
    pub fn sample_big_jump_displacement(
        &self,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<DVector<f64>> {
        if dim == 0 {
            return Err(Error::invalid("dim", "dimension must be at least 1"));
        }
        let s = self.sample_tail_jump(1.0, rng)?;
        let sd = s.sqrt();
        Ok(DVector::from_fn(dim, |_, _| {
            sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        }))
    }

    /// Key=value serialization (stable kind only).
    pub fn to_kv(&self) -> Result<String> {
        match self.kind {
            Kind::Stable { beta, c } => Ok(format!("kind=stable\nbeta={beta}\nc={c}\n")),
            Kind::Custom { .. } => Err(Error::Unsupported(
                "custom Lévy densities have no key=value form".to_string(),
            )),
        }
    }

    /// Parse the key=value form produced by [`SubordinatorSpec::to_kv`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kind = None;
        let mut beta = None;
        let mut c = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("spec", format!("malformed line `{line}`")))?;
            match key.trim() {
                "kind" => kind = Some(value.trim().to_string()),
                "beta" => beta = Some(parse_f64("beta", value)?),
                "c" => c = Some(parse_f64("c", value)?),
                "eps" => {} // sampling parameter, carried by run configs
                other => {
                    return Err(Error::invalid("spec", format!("unknown key `{other}`")));
                }
            }
        }
        match kind.as_deref() {
            Some("stable") => SubordinatorSpec::stable(
                beta.ok_or_else(|| Error::invalid("beta", "missing"))?,
                c.ok_or_else(|| Error::invalid("c", "missing"))?,
            ),
            Some(other) => Err(Error::invalid("kind", format!("unknown kind `{other}`"))),
            None => Err(Error::invalid("kind", "missing")),
        }
    }
}

fn parse_f64(name: &'static str, value: &str) -> Result<f64> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::invalid(name, format!("{e}")))
}

/// Result of [`SubordinatorSpec::moment_scaling_check`].
#[derive(Debug, Clone)]
pub struct MomentScaling {
    pub theta: f64,
    pub ratios: Vec<f64>,
    pub limit: Option<f64>,
    pub converged: bool,
}

/// One realized clock path: ordered jumps of size `≥ cut` plus the
/// compensating drift for the removed small jumps.
#[derive(Debug, Clone)]
pub struct SubordinatorPath {
    horizon: f64,
    jumps: Vec<(f64, f64)>,
    drift_rate: f64,
    cut: f64,
    truncation_var_rate: f64,
}

impl SubordinatorPath {
    /// Build a clock path from explicit parts, validating the invariants:
    /// jump times strictly increasing in `(0, horizon]`, sizes positive,
    /// drift rate nonnegative. Useful for deterministic experiments.
    pub fn from_parts(
        horizon: f64,
        jumps: Vec<(f64, f64)>,
        drift_rate: f64,
        cut: f64,
    ) -> Result<Self> {
        if !(horizon >= 0.0) {
            return Err(Error::invalid("horizon", "must be nonnegative"));
        }
        if !(drift_rate >= 0.0) {
            return Err(Error::invalid("drift_rate", "must be nonnegative"));
        }
        let mut prev = 0.0;
        for &(t, ds) in &jumps {
            if !(t > prev && t <= horizon) {
                return Err(Error::invalid(
                    "jumps",
                    format!("jump times must be strictly increasing in (0, {horizon}], got {t}"),
                ));
            }
            if !(ds > 0.0) {
                return Err(Error::invalid("jumps", "jump sizes must be positive"));
            }
            prev = t;
        }
        Ok(Self {
            horizon,
            jumps,
            drift_rate,
            cut,
            truncation_var_rate: 0.0,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Ordered jumps `(time, size)` with strictly increasing times in
    /// `(0, horizon]` and sizes `≥ cut`.
    pub fn jumps(&self) -> &[(f64, f64)] {
        &self.jumps
    }

    /// Compensating drift rate for the removed sub-`cut` jumps.
    pub fn drift_rate(&self) -> f64 {
        self.drift_rate
    }

    /// Truncation level used when sampling.
    pub fn cut(&self) -> f64 {
        self.cut
    }

    /// Per-unit-time variance of the neglected sub-`cut` fluctuation.
    pub fn truncation_var_rate(&self) -> f64 {
        self.truncation_var_rate
    }

    /// Clock value `S_t = r_ε · t + Σ_{t_i ≤ t} ΔS_i` (càdlàg).
    pub fn value_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon);
        let jump_part: f64 = self
            .jumps
            .iter()
            .take_while(|(ti, _)| *ti <= t)
            .map(|(_, ds)| ds)
            .sum();
        self.drift_rate * t + jump_part
    }

    /// Terminal clock value `S_horizon`.
    pub fn total(&self) -> f64 {
        self.value_at(self.horizon)
    }

    /// Restriction to jumps of size `< hi` (drift part unchanged). Used by
    /// the compound-Poisson decomposition check.
    pub fn truncate_jumps_above(&self, hi: f64) -> SubordinatorPath {
        SubordinatorPath {
            horizon: self.horizon,
            jumps: self
                .jumps
                .iter()
                .filter(|(_, ds)| *ds < hi)
                .copied()
                .collect(),
            drift_rate: self.drift_rate,
            cut: self.cut,
            truncation_var_rate: self.truncation_var_rate,
        }
    }

    /// CSV rows `time,jump_size` (header included).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "time,jump_size")?;
        for (t, ds) in &self.jumps {
            writeln!(out, "{t:.17e},{ds:.17e}")?;
        }
        Ok(())
    }
}

/// Closed-form distribution function `P{S_t ≤ x}` of the `β = 1/2` stable
/// subordinator with Lévy density `c·u^{-3/2}`: `erfc(c √π t / √x)`.
pub fn stable_half_cdf(c: f64, t: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    erfc(c * std::f64::consts::PI.sqrt() * t / x.sqrt())
}
