//! Built-in SDE models used by the experiments: zero drift, linear drift,
//! the kinetic (position/velocity) linear system, the pendulum, and general
//! stochastic Hamiltonian systems with noise on the velocity block.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::SdeModel;

/// `dX = A dL` with no drift.
pub fn zero_drift(dim: usize, a: DMatrix<f64>) -> Result<SdeModel> {
    let model = SdeModel::new(
        dim,
        Arc::new(move |x: &DVector<f64>| DVector::zeros(x.len())),
        Arc::new(move |x: &DVector<f64>| DMatrix::zeros(x.len(), x.len())),
        a,
        1.0,
    )?;
    Ok(model.mark_zero_drift().with_hessian(Arc::new(|x: &DVector<f64>| {
        vec![DMatrix::zeros(x.len(), x.len()); x.len()]
    })))
}

/// Linear drift `b(x) = B x`.
pub fn linear(b: DMatrix<f64>, a: DMatrix<f64>) -> Result<SdeModel> {
    let dim = b.nrows();
    if !b.is_square() {
        return Err(Error::DimensionMismatch("drift matrix must be square".into()));
    }
    let bound = (0..dim)
        .map(|i| b.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let b_drift = b.clone();
    let b_jac = b.clone();
    let model = SdeModel::new(
        dim,
        Arc::new(move |x: &DVector<f64>| &b_drift * x),
        Arc::new(move |_: &DVector<f64>| b_jac.clone()),
        a,
        bound,
    )?;
    Ok(model.with_hessian(Arc::new(move |_: &DVector<f64>| {
        vec![DMatrix::zeros(dim, dim); dim]
    })))
}

/// The kinetic linear system in dimension 2:
/// `B = [[0, 1], [0, 0]]`, `A = diag(0, 1)` — position integrates velocity,
/// noise enters the velocity only.
pub fn kinetic_linear() -> Result<SdeModel> {
    linear(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]),
    )
}

/// The pendulum: `b(x, v) = (v, sin x)`, `A = diag(0, 1)`.
pub fn pendulum() -> Result<SdeModel> {
    let model = SdeModel::new(
        2,
        Arc::new(|z: &DVector<f64>| DVector::from_vec(vec![z[1], z[0].sin()])),
        Arc::new(|z: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, z[0].cos(), 0.0])
        }),
        DMatrix::from_partial_diagonal(2, 2, &[0.0, 1.0]),
        1.0,
    )?;
    Ok(model.with_hessian(Arc::new(|z: &DVector<f64>| {
        vec![
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -z[0].sin(), 0.0]),
            DMatrix::zeros(2, 2),
        ]
    })))
}

type GradFn =
    dyn Fn(&DVector<f64>, &DVector<f64>) -> (DVector<f64>, DVector<f64>) + Send + Sync;
type HessFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// A Hamiltonian `H(x, y)` given by its gradient (and optionally its full
/// Hessian) with respect to the stacked phase-space variable `(x, y)`.
#[derive(Clone)]
pub struct Hamiltonian {
    /// Position dimension `d`; the phase space has dimension `2d`.
    pub dim: usize,
    grad: Arc<GradFn>,
    hess: Option<Arc<HessFn>>,
}

impl Hamiltonian {
    pub fn new(dim: usize, grad: Arc<GradFn>) -> Self {
        Self {
            dim,
            grad,
            hess: None,
        }
    }

    pub fn with_hessian(mut self, hess: Arc<HessFn>) -> Self {
        self.hess = Some(hess);
        self
    }

    /// `(∇_x H, ∇_y H)` at `(x, y)`.
    pub fn gradient(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (self.grad)(x, y)
    }
}

/// The stochastic Hamilton system
/// `dX = ∇_y H dt`, `dY = -∇_x H dt + A_v dL`
/// as a single `2d`-dimensional model with `A = blockdiag(0, A_v)`.
///
/// When the Hamiltonian carries no Hessian the model Jacobian falls back to
/// finite differences of the drift.
pub fn hamiltonian_model(h: &Hamiltonian, a_v: DMatrix<f64>, lipschitz_bound: f64) -> Result<SdeModel> {
    let d = h.dim;
    if a_v.nrows() != d || a_v.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "velocity noise matrix is {}x{}, expected {d}x{d}",
            a_v.nrows(),
            a_v.ncols()
        )));
    }
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    a.view_mut((d, d), (d, d)).copy_from(&a_v);

    let grad = h.grad.clone();
    let drift = Arc::new(move |z: &DVector<f64>| {
        let x = DVector::from(z.rows(0, d).into_owned());
        let y = DVector::from(z.rows(d, d).into_owned());
        let (gx, gy) = grad(&x, &y);
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&gy);
        out.rows_mut(d, d).copy_from(&(-gx));
        out
    });

    match &h.hess {
        Some(hess) => {
            let hess = hess.clone();
            let jacobian = Arc::new(move |z: &DVector<f64>| {
                let x = DVector::from(z.rows(0, d).into_owned());
                let y = DVector::from(z.rows(d, d).into_owned());
                let hm = hess(&x, &y);
                let mut jac = DMatrix::zeros(2 * d, 2 * d);
                // drift = (∇_y H, -∇_x H):
                //   ∂(∇_y H)/∂(x, y) = [H_yx | H_yy], ∂(-∇_x H)/∂(x, y) = -[H_xx | H_xy]
                jac.view_mut((0, 0), (d, d)).copy_from(&hm.view((d, 0), (d, d)));
                jac.view_mut((0, d), (d, d)).copy_from(&hm.view((d, d), (d, d)));
                jac.view_mut((d, 0), (d, d)).copy_from(&(-hm.view((0, 0), (d, d))));
                jac.view_mut((d, d), (d, d)).copy_from(&(-hm.view((0, d), (d, d))));
                jac
            });
            SdeModel::new(2 * d, drift, jacobian, a, lipschitz_bound)
        }
        None => SdeModel::from_drift_fd(2 * d, drift, a, lipschitz_bound),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pendulum_fields() {
        let model = pendulum().unwrap();
        let z = DVector::from_vec(vec![0.6, -1.2]);
        let b = model.drift(&z);
        assert_relative_eq!(b[0], -1.2);
        assert_relative_eq!(b[1], 0.6_f64.sin());
        let jac = model.jacobian(&z);
        assert_relative_eq!(jac[(0, 1)], 1.0);
        assert_relative_eq!(jac[(1, 0)], 0.6_f64.cos());
        let hess = model.hessian(&z).unwrap();
        assert_relative_eq!(hess[0][(1, 0)], -0.6_f64.sin());
        assert_relative_eq!(hess[1].norm(), 0.0);
    }

    #[test]
    fn free_hamiltonian_drift() {
        // H = |y|^2/2: drift (y, 0)
        let h = Hamiltonian::new(
            2,
            Arc::new(|_x: &DVector<f64>, y: &DVector<f64>| (DVector::zeros(2), y.clone())),
        )
        .with_hessian(Arc::new(|_x: &DVector<f64>, _y: &DVector<f64>| {
            let mut m = DMatrix::zeros(4, 4);
            m.view_mut((2, 2), (2, 2)).copy_from(&DMatrix::identity(2, 2));
            m
        }));
        let model = hamiltonian_model(&h, DMatrix::identity(2, 2), 1.0).unwrap();
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let b = model.drift(&z);
        assert_eq!(b.as_slice(), &[3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn pendulum_as_hamiltonian() {
        // H(x, y) = y^2/2 + cos x gives drift (y, sin x)
        let h = Hamiltonian::new(
            1,
            Arc::new(|x: &DVector<f64>, y: &DVector<f64>| {
                (DVector::from_vec(vec![-x[0].sin()]), y.clone())
            }),
        )
        .with_hessian(Arc::new(|x: &DVector<f64>, _y: &DVector<f64>| {
            DMatrix::from_row_slice(2, 2, &[-x[0].cos(), 0.0, 0.0, 1.0])
        }));
        let model = hamiltonian_model(&h, DMatrix::identity(1, 1), 1.0).unwrap();
        let reference = pendulum().unwrap();
        for probe in [[0.3, -0.9], [1.4, 0.2], [-2.0, 0.7]] {
            let z = DVector::from_vec(probe.to_vec());
            assert!((model.drift(&z) - reference.drift(&z)).norm() < 1e-14);
            assert!((model.jacobian(&z) - reference.jacobian(&z)).norm() < 1e-14);
        }
        assert_eq!(model.a(), reference.a());
    }

    #[test]
    fn hamiltonian_without_hessian_uses_fd() {
        let h = Hamiltonian::new(
            1,
            Arc::new(|x: &DVector<f64>, y: &DVector<f64>| {
                (DVector::from_vec(vec![-x[0].sin()]), y.clone())
            }),
        );
        let model = hamiltonian_model(&h, DMatrix::identity(1, 1), 1.0).unwrap();
        let z = DVector::from_vec(vec![0.5, 0.1]);
        let jac = model.jacobian(&z);
        assert_relative_eq!(jac[(1, 0)], 0.5_f64.cos(), epsilon = 1e-6);
    }

    #[test]
    fn hamiltonian_dimension_mismatch() {
        let h = Hamiltonian::new(
            2,
            Arc::new(|_x: &DVector<f64>, y: &DVector<f64>| (DVector::zeros(2), y.clone())),
        );
        assert!(hamiltonian_model(&h, DMatrix::identity(3, 3), 1.0).is_err());
    }

    #[test]
    fn kinetic_linear_shape() {
        let model = kinetic_linear().unwrap();
        let z = DVector::from_vec(vec![2.0, 5.0]);
        assert_eq!(model.drift(&z).as_slice(), &[5.0, 0.0]);
        assert_eq!(model.a()[(1, 1)], 1.0);
        assert_eq!(model.a()[(0, 0)], 0.0);
    }
}
