//! Small dense linear-algebra helpers: matrix exponential, numerical rank,
//! and symmetric-spectrum utilities. Dimensions are small throughout (the
//! state dimension of an SDE), so dense algorithms are used unconditionally.

use nalgebra::{DMatrix, DVector};

/// Padé(13) numerator coefficients for the matrix exponential.
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Matrix exponential by scaling-and-squaring with a fixed-order Padé
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm requires a square matrix");
    let n = a.nrows();
    let theta13 = 5.371_920_351_148_152;
    let norm = one_norm(a);
    let squarings = if norm > theta13 {
        (norm / theta13).log2().ceil().max(0.0) as u32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings as i32);

    let ident = DMatrix::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let u_inner = &a6 * (PADE13[13] * &a6 + PADE13[11] * &a4 + PADE13[9] * &a2)
        + PADE13[7] * &a6
        + PADE13[5] * &a4
        + PADE13[3] * &a2
        + PADE13[1] * &ident;
    let u = &scaled * u_inner;
    let v = &a6 * (PADE13[12] * &a6 + PADE13[10] * &a4 + PADE13[8] * &a2)
        + PADE13[6] * &a6
        + PADE13[4] * &a4
        + PADE13[2] * &a2
        + PADE13[0] * &ident;

    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut result = lhs
        .lu()
        .solve(&rhs)
        .expect("Padé denominator is singular; matrix exponential failed");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Singular values of `m`, descending.
pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().svd(false, false).singular_values
}

/// Numerical rank: number of singular values above `tol` times the largest.
/// Returns the rank and the smallest retained singular value (0 if rank 0).
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> (usize, f64) {
    let sv = singular_values(m);
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return (0, 0.0);
    }
    let cut = tol * top;
    let retained: Vec<f64> = sv.iter().cloned().filter(|&s| s > cut).collect();
    let rank = retained.len();
    let smallest = retained.last().copied().unwrap_or(0.0);
    (rank, smallest)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().cloned().fold(0.0, f64::max)
}
