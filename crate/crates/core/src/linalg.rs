//! Small dense helpers shared by `algebra`, `synth` and `transcoder`.
//!
//! Vectors are stored as `f32`; every reduction accumulates in `f64`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::{Error, Result};

/// Largest condition number accepted by the normal-equation solvers.
pub const CONDITION_LIMIT: f64 = 1e8;

/// Norms at or below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm64(a: &[f64]) -> f64 {
    dot64(a, a).sqrt()
}

pub fn to_f64(a: &[f32]) -> Vec<f64> {
    a.iter().map(|&x| x as f64).collect()
}

pub fn to_f32(a: &[f64]) -> Vec<f32> {
    a.iter().map(|&x| x as f32).collect()
}

/// `a / ‖a‖`, or [`Error::DegenerateDirection`] for a near-zero vector.
pub fn unit(a: &[f32]) -> Result<Vec<f32>> {
    let n = norm(a);
    if !(n > DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm: n });
    }
    Ok(a.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// 2-norm condition number of a symmetric matrix (ratio of extreme
/// absolute eigenvalues); infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let abs = eig.eigenvalues.iter().map(|x| x.abs());
    let max = abs.clone().fold(0.0f64, f64::max);
    let min = abs.fold(f64::INFINITY, f64::min);
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `m x = rhs` for symmetric positive-definite `m`, refusing when the
/// condition number exceeds [`CONDITION_LIMIT`].
pub fn solve_spd(m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let condition = condition_number(&m);
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            condition,
            limit: CONDITION_LIMIT,
        });
    }
    let chol = m.cholesky().ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
        limit: CONDITION_LIMIT,
    })?;
    Ok(chol.solve(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_and_degenerate() {
        let u = unit(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-7 && (u[1] - 0.8).abs() < 1e-7);
        assert!(matches!(unit(&[0.0, 0.0]), Err(Error::DegenerateDirection { .. })));
    }

    #[test]
    fn condition_guard() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-10]);
        assert!(matches!(
            solve_spd(m, &DMatrix::from_element(2, 1, 1.0)),
            Err(Error::IllConditioned { .. })
        ));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((condition_number(&m) - 3.0).abs() < 1e-12);
        let x = solve_spd(m, &DMatrix::from_column_slice(2, 1, &[3.0, 3.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
