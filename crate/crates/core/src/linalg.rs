//! Small dense linear-algebra helpers shared by the numerical modules.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HcdcError, Result};

pub type Mat = DMatrix<f64>;

/// Largest condition number accepted by the dense solvers.
pub const CONDITION_LIMIT: f64 = 1e12;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    // Column-major fill order is part of the determinism contract.
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

pub fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Extreme eigenvalues of a symmetric matrix, `(min, max)`.
pub fn sym_eig_range(m: &Mat) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Condition number of a symmetric positive semi-definite matrix; infinite
/// when the smallest eigenvalue is not strictly positive.
pub fn spd_condition(m: &Mat) -> f64 {
    let (min, max) = sym_eig_range(m);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `m x = rhs` for symmetric positive definite `m` after checking the
/// condition number.
pub fn solve_spd(m: &Mat, rhs: &Mat) -> Result<Mat> {
    if m.nrows() != m.ncols() || m.nrows() != rhs.nrows() {
        return Err(HcdcError::shape(
            "solve_spd",
            format!("{0}x{0} system", m.nrows()),
            format!("{}x{} with rhs {} rows", m.nrows(), m.ncols(), rhs.nrows()),
        ));
    }
    let condition = spd_condition(m);
    if !(condition < CONDITION_LIMIT) {
        return Err(HcdcError::Singular {
            condition,
            limit: CONDITION_LIMIT,
        });
    }
    let chol = m.clone().cholesky().ok_or(HcdcError::Singular {
        condition,
        limit: CONDITION_LIMIT,
    })?;
    Ok(chol.solve(rhs))
}

/// Deterministic start vector for power iterations.
fn power_start(rows: usize, cols: usize) -> Mat {
    let mut rng = seeded_rng(0x5eed_0f11);
    let mut v = gaussian(&mut rng, rows, cols, 1.0);
    let norm = v.norm();
    v /= norm;
    v
}

/// Power iteration with Rayleigh quotient on a symmetric positive
/// semi-definite operator. Converges when successive quotients differ by at
/// most `tol * max(1, |rho|)`; the quotient error is quadratic in the
/// eigenvector error, so near-degenerate top eigenvalues still settle.
pub fn power_iteration<F>(apply: F, rows: usize, cols: usize, tol: f64, max_iter: usize) -> Result<f64>
where
    F: Fn(&Mat) -> Mat,
{
    let mut v = power_start(rows, cols);
    let mut prev = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let av = apply(&v);
        let rho = frob_dot(&v, &av);
        if !rho.is_finite() {
            return Err(HcdcError::NonFinite("power iteration".into()));
        }
        residual = (rho - prev).abs();
        if residual <= tol * rho.abs().max(1.0) {
            return Ok(rho);
        }
        prev = rho;
        let norm = av.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = av / norm;
    }
    Err(HcdcError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Fixed-step power iteration returning the last Rayleigh quotient.
pub fn power_iteration_steps<F>(apply: F, rows: usize, cols: usize, steps: usize) -> f64
where
    F: Fn(&Mat) -> Mat,
{
    let mut v = power_start(rows, cols);
    let mut rho = 0.0;
    for _ in 0..steps.max(1) {
        let av = apply(&v);
        rho = frob_dot(&v, &av);
        let norm = av.norm();
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        v = av / norm;
    }
    rho
}

/// Rows of `m` selected by `idx`, in the given order.
pub fn select_rows(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

pub fn select_square(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), idx.len(), |r, c| m[(idx[r], idx[c])])
}

/// Numerical rank from singular values with threshold `rel * sigma_max`.
pub fn numerical_rank(m: &Mat, rel: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > rel * max).count()
}
