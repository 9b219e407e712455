//! Bracket hierarchies and rank conditions.
//!
//! For a drift `b` and constant noise matrix `A`, the hierarchy is
//! `B_1(x) = ∇b(x)` and `B_n = (b·∇)B_{n-1} − ∇b·B_{n-1}`. The rank of the
//! stacked matrix `[A, B_1(x)A, …, B_n(x)A]` being full is the Hörmander-type
//! condition under which the law of the SDE solution has a density; for
//! linear drift `b(x) = Bx` it reduces to the classical Kalman condition
//! `rank[A, BA, …, B^{d-1}A] = d`.
//!
//! Directional derivatives of the bracket maps are computed by two-level
//! Richardson central differences (base step `1e-4·(1+|x|)`) unless the
//! model carries an analytic hessian, which is then used for the second
//! bracket. Entries where the two difference levels disagree by more than
//! `1e-3` relative are reported as unstable.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::SdeModel;
use crate::linalg::{min_symmetric_eigenvalue, numerical_rank, singular_values};

/// Default numerical-rank threshold relative to the top singular value.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Default base differencing step at `x`.
pub fn default_bracket_step(x: &DVector<f64>) -> f64 {
    1e-4 * (1.0 + x.norm())
}

/// The bracket matrices at a point together with the stacked rank object.
#[derive(Debug, Clone)]
pub struct BracketHierarchy {
    pub x: DVector<f64>,
    pub order: usize,
    /// `[B_1(x), …, B_n(x)]`.
    pub matrices: Vec<DMatrix<f64>>,
    /// `[A, B_1(x)A, …, B_n(x)A]`, `d × (n+1)d`.
    pub stacked: DMatrix<f64>,
    /// Singular values of `stacked`, descending.
    pub singular_values: DVector<f64>,
    /// Worst relative disagreement between the two central-difference levels.
    pub max_fd_disagreement: f64,
    /// Entries `(order, i, j)` whose difference levels disagree by more than
    /// `1e-3` relative.
    pub unstable_entries: Vec<(usize, usize, usize)>,
    /// Set when `order > 4`: nested differencing noise grows with the order,
    /// so analytic derivatives are recommended.
    pub high_order_warning: bool,
}

struct FdStats {
    max_disagreement: f64,
    unstable: Vec<(usize, usize, usize)>,
}

fn bracket_matrix(
    model: &SdeModel,
    x: &DVector<f64>,
    order: usize,
    h0: f64,
    stats: &mut FdStats,
) -> DMatrix<f64> {
    if order == 1 {
        return model.jacobian(x);
    }
    let prev_here = bracket_matrix(model, x, order - 1, h0, stats);
    let b = model.drift(x);
    let speed = b.norm();
    let d = model.dim();
    let directional = if speed == 0.0 {
        DMatrix::zeros(d, d)
    } else if order == 2 && model.has_hessian() {
        model
            .directional_jacobian_derivative(x, &b)
            .expect("hessian present")
    } else {
        let e = &b / speed;
        let coarse = {
            let plus = bracket_matrix(model, &(x + h0 * &e), order - 1, h0, stats);
            let minus = bracket_matrix(model, &(x - h0 * &e), order - 1, h0, stats);
            (plus - minus) * (speed / (2.0 * h0))
        };
        let fine = {
            let plus = bracket_matrix(model, &(x + 0.5 * h0 * &e), order - 1, h0, stats);
            let minus = bracket_matrix(model, &(x - 0.5 * h0 * &e), order - 1, h0, stats);
            (plus - minus) * (speed / h0)
        };
        let extrapolated = (4.0 * &fine - &coarse) / 3.0;
        let scale = extrapolated
            .iter()
            .map(|v| v.abs())
            .fold(0.0_f64, f64::max)
            .max(1e-300);
        for i in 0..d {
            for j in 0..d {
                let disagreement = (fine[(i, j)] - coarse[(i, j)]).abs() / scale;
                stats.max_disagreement = stats.max_disagreement.max(disagreement);
                if disagreement > 1e-3 {
                    stats.unstable.push((order, i, j));
                }
            }
        }
        extrapolated
    };
    directional - model.jacobian(x) * prev_here
}

/// Compute `B_1(x), …, B_n(x)` and the stacked matrix `[A, B_1A, …, B_nA]`.
///
/// `step` overrides the base differencing step (default
/// [`default_bracket_step`]).
pub fn bracket_hierarchy(
    model: &SdeModel,
    x: &DVector<f64>,
    n: usize,
    step: Option<f64>,
) -> Result<BracketHierarchy> {
    if n == 0 {
        return Err(Error::invalid("n", "hierarchy order must be at least 1"));
    }
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has dimension {}, model {}",
            x.len(),
            model.dim()
        )));
    }
    let h0 = step.unwrap_or_else(|| default_bracket_step(x));
    if !(h0 > 0.0) {
        return Err(Error::invalid("step", "differencing step must be positive"));
    }
    let high_order_warning = n > 4;
    if high_order_warning {
        log::warn!(
            "bracket order {n} > 4: nested differencing noise grows; \
             supply analytic derivatives if possible"
        );
    }
    let mut stats = FdStats {
        max_disagreement: 0.0,
        unstable: Vec::new(),
    };
    let mut matrices = Vec::with_capacity(n);
    for order in 1..=n {
        matrices.push(bracket_matrix(model, x, order, h0, &mut stats));
    }
    let d = model.dim();
    let mut stacked = DMatrix::zeros(d, (n + 1) * d);
    stacked.view_mut((0, 0), (d, d)).copy_from(model.a());
    for (idx, bmat) in matrices.iter().enumerate() {
        stacked
            .view_mut((0, (idx + 1) * d), (d, d))
            .copy_from(&(bmat * model.a()));
    }
    let sv = singular_values(&stacked);
    stats.unstable.sort_unstable();
    stats.unstable.dedup();
    Ok(BracketHierarchy {
        x: x.clone(),
        order: n,
        matrices,
        stacked,
        singular_values: sv,
        max_fd_disagreement: stats.max_disagreement,
        unstable_entries: stats.unstable,
        high_order_warning,
    })
}

/// Outcome of a rank condition check.
#[derive(Debug, Clone, Copy)]
pub struct RankCheck {
    pub full_rank: bool,
    pub rank: usize,
    /// Smallest singular value above the threshold (0 when rank 0).
    pub smallest_retained: f64,
}

/// Rank condition on `[A, B_1(x)A, …, B_n(x)A]`: full rank `d` means the
/// bracket condition holds at `x` at order `n`.
pub fn hormander_rank_check(
    model: &SdeModel,
    x: &DVector<f64>,
    n: usize,
    tol: f64,
) -> Result<RankCheck> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "threshold must be positive"));
    }
    let hierarchy = bracket_hierarchy(model, x, n, None)?;
    let (rank, smallest) = numerical_rank(&hierarchy.stacked, tol);
    Ok(RankCheck {
        full_rank: rank == model.dim(),
        rank,
        smallest_retained: smallest,
    })
}

/// Kalman controllability rank of `[A, BA, …, B^{d-1}A]`.
pub fn kalman_rank(b: &DMatrix<f64>, a: &DMatrix<f64>, tol: f64) -> Result<RankCheck> {
    if !b.is_square() || !a.is_square() || b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch(
            "Kalman rank needs square matrices of equal size".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "threshold must be positive"));
    }
    let d = b.nrows();
    let mut stacked = DMatrix::zeros(d, d * d);
    let mut power = a.clone();
    for k in 0..d {
        stacked.view_mut((0, k * d), (d, d)).copy_from(&power);
        power = b * &power;
    }
    let (rank, smallest) = numerical_rank(&stacked, tol);
    Ok(RankCheck {
        full_rank: rank == d,
        rank,
        smallest_retained: smallest,
    })
}

/// Uniform Hörmander constant of order 1:
/// `min_x λ_min(AA* + ∇b(x)A (∇b(x)A)*)`, the sphere infimum of
/// `|aA|² + |a∇b(x)A|²` over unit row vectors at the sampled points.
/// Zero flags a degenerate point.
pub fn uniform_h1_constant(model: &SdeModel, sample_points: &[DVector<f64>]) -> Result<f64> {
    uniform_hormander_constant(model, sample_points, 1, None)
}

/// Diagnostic generalization to order `n`:
/// `min_x λ_min(AA* + Σ_{j=1}^n B_j(x)A (B_j(x)A)*)` — the squared smallest
/// singular value of the stacked bracket matrix. For `n ≥ 2` this quantity
/// carries no theorem-level claim; it is exposed for exploration only.
pub fn uniform_hormander_constant(
    model: &SdeModel,
    sample_points: &[DVector<f64>],
    n: usize,
    step: Option<f64>,
) -> Result<f64> {
    if sample_points.is_empty() {
        return Err(Error::invalid("sample_points", "need at least one point"));
    }
    let mut worst = f64::INFINITY;
    for x in sample_points {
        let lambda_min = if n == 1 {
            let grad_a = model.jacobian(x) * model.a();
            let m = model.a() * model.a().transpose() + &grad_a * grad_a.transpose();
            min_symmetric_eigenvalue(&m)
        } else {
            let hierarchy = bracket_hierarchy(model, x, n, step)?;
            let smallest = hierarchy
                .singular_values
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            smallest * smallest
        };
        worst = worst.min(lambda_min.max(0.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;
    use std::sync::Arc;

    use approx::assert_relative_eq;

    #[test]
    fn linear_brackets_are_signed_powers() {
        let b = DMatrix::from_row_slice(2, 2, &[0.4, 1.0, -0.3, 0.2]);
        let model = models::linear(b.clone(), DMatrix::identity(2, 2)).unwrap();
        let x = DVector::from_vec(vec![0.8, -0.1]);
        let hierarchy = bracket_hierarchy(&model, &x, 3, None).unwrap();
        let b2 = -(&b * &b);
        let b3 = &b * &b * &b;
        assert!((hierarchy.matrices[0].clone() - &b).norm() < 1e-12);
        assert!((hierarchy.matrices[1].clone() - b2).norm() < 1e-9);
        assert!((hierarchy.matrices[2].clone() - b3).norm() < 1e-9);
    }

    #[test]
    fn scalar_sine_brackets() {
        // d = 1, b = sin x: B_1 = cos x, B_2 = -sin^2 x - cos^2 x = -1
        let model = SdeModel::new(
            1,
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0].sin()])),
            Arc::new(|x: &DVector<f64>| DMatrix::from_vec(1, 1, vec![x[0].cos()])),
            DMatrix::identity(1, 1),
            1.0,
        )
        .unwrap();
        for x0 in [0.3, 1.1, -2.0] {
            let x = DVector::from_vec(vec![x0]);
            let h = bracket_hierarchy(&model, &x, 2, None).unwrap();
            assert_relative_eq!(h.matrices[0][(0, 0)], x0.cos(), epsilon = 1e-12);
            assert_relative_eq!(h.matrices[1][(0, 0)], -1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn constant_drift_kills_brackets() {
        let model = SdeModel::new(
            2,
            Arc::new(|_: &DVector<f64>| DVector::from_vec(vec![1.0, -2.0])),
            Arc::new(|_: &DVector<f64>| DMatrix::zeros(2, 2)),
            DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        let h = bracket_hierarchy(&model, &DVector::zeros(2), 3, None).unwrap();
        for m in &h.matrices {
            assert!(m.norm() < 1e-9);
        }
    }

    #[test]
    fn kinetic_linear_rank_two() {
        let model = models::kinetic_linear().unwrap();
        let check =
            hormander_rank_check(&model, &DVector::zeros(2), 1, DEFAULT_RANK_TOL).unwrap();
        assert!(check.full_rank);
        assert_eq!(check.rank, 2);
        assert!(check.smallest_retained > 0.1);
    }

    #[test]
    fn degenerate_zero_drift_rank_one() {
        let a = DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]);
        let model = models::zero_drift(2, a).unwrap();
        let check =
            hormander_rank_check(&model, &DVector::zeros(2), 1, DEFAULT_RANK_TOL).unwrap();
        assert!(!check.full_rank);
        assert_eq!(check.rank, 1);
    }

    #[test]
    fn pendulum_rank_two_everywhere() {
        let model = models::pendulum().unwrap();
        for x0 in [[0.0, 0.0], [1.2, -0.4], [3.1, 0.9]] {
            let check = hormander_rank_check(
                &model,
                &DVector::from_vec(x0.to_vec()),
                1,
                DEFAULT_RANK_TOL,
            )
            .unwrap();
            assert!(check.full_rank);
        }
    }

    #[test]
    fn kalman_examples() {
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let a = DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]);
        assert_eq!(kalman_rank(&b, &a, 1e-8).unwrap().rank, 2);
        let any_b = DMatrix::from_row_slice(2, 2, &[3.0, -1.0, 2.0, 0.5]);
        assert_eq!(
            kalman_rank(&any_b, &DMatrix::identity(2, 2), 1e-8).unwrap().rank,
            2
        );
        assert_eq!(
            kalman_rank(&DMatrix::zeros(2, 2), &a, 1e-8).unwrap().rank,
            1
        );
    }

    #[test]
    fn uniform_h1_pendulum_is_one() {
        let model = models::pendulum().unwrap();
        let points: Vec<DVector<f64>> = (0..12)
            .map(|k| DVector::from_vec(vec![0.5 * k as f64 - 3.0, 0.3 * k as f64 - 1.8]))
            .collect();
        let c1 = uniform_h1_constant(&model, &points).unwrap();
        assert_relative_eq!(c1, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn uniform_h1_identity_noise() {
        let b = DMatrix::from_row_slice(2, 2, &[0.1, 0.4, -0.2, 0.3]);
        let model = models::linear(b, DMatrix::identity(2, 2)).unwrap();
        let c1 = uniform_h1_constant(&model, &[DVector::zeros(2)]).unwrap();
        assert!(c1 >= 1.0 - 1e-12);
    }

    #[test]
    fn uniform_h1_degenerate_zero() {
        let a = DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]);
        let model = models::zero_drift(2, a).unwrap();
        let c1 = uniform_h1_constant(&model, &[DVector::zeros(2)]).unwrap();
        assert_relative_eq!(c1, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn fd_second_bracket_matches_hessian_on_pendulum() {
        let with_hessian = models::pendulum().unwrap();
        // same model, hessian withheld: forces the differencing path
        let without_hessian = SdeModel::new(
            2,
            Arc::new(|z: &DVector<f64>| DVector::from_vec(vec![z[1], z[0].sin()])),
            Arc::new(|z: &DVector<f64>| {
                DMatrix::from_row_slice(2, 2, &[0.0, 1.0, z[0].cos(), 0.0])
            }),
            DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]),
            1.0,
        )
        .unwrap();
        for probe in [[0.4, 0.8], [-1.3, 0.2], [2.2, -0.6]] {
            let x = DVector::from_vec(probe.to_vec());
            let exact = bracket_hierarchy(&with_hessian, &x, 2, None).unwrap();
            let fd = bracket_hierarchy(&without_hessian, &x, 2, None).unwrap();
            let scale = exact.matrices[1].norm().max(1e-12);
            let err = (exact.matrices[1].clone() - fd.matrices[1].clone()).norm() / scale;
            assert!(err < 1e-6, "relative error {err} at {probe:?}");
            assert!(fd.unstable_entries.is_empty());
        }
    }

    #[test]
    fn point_independence_for_linear_drift() {
        let b = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.2, 0.0, 0.0]);
        let model = models::linear(b, DMatrix::from_partial_diagonal(3, 3, &[0.0, 0.0, 1.0]))
            .unwrap();
        let h1 = bracket_hierarchy(&model, &DVector::zeros(3), 2, None).unwrap();
        let h2 =
            bracket_hierarchy(&model, &DVector::from_vec(vec![5.0, -2.0, 1.0]), 2, None)
                .unwrap();
        assert!((h1.stacked - h2.stacked).norm() < 1e-8);
    }

    #[test]
    fn rejects_zero_order() {
        let model = models::pendulum().unwrap();
        assert!(bracket_hierarchy(&model, &DVector::zeros(2), 0, None).is_err());
    }
}
