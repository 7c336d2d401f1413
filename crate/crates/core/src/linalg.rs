//! Small dense helpers over nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Solves `a x = b` for symmetric `a`, trying Cholesky (after negation for
/// negative definite systems) before LU. On failure, names the parameters
/// loading on the flattest eigen-direction.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    if let Some(ch) = (-a.clone()).cholesky() {
        return Ok(-ch.solve(b));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(a.clone());
    let (k, min_abs) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, v)| (k, v.abs()))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap_or((0, 0.0));
    if min_abs <= 1e-12 * scale {
        return Err(Error::Singular(format!(
            "information is flat along {}",
            describe_direction(&eig.eigenvectors.column(k).into_owned(), names)
        )));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular("LU solve failed".into()))
}

/// Human-readable description of a direction in parameter space.
pub fn describe_direction(v: &DVector<f64>, names: &[String]) -> String {
    let mut parts: Vec<(usize, f64)> = v.iter().copied().enumerate().filter(|(_, c)| c.abs() > 0.1).collect();
    parts.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    parts
        .iter()
        .take(4)
        .map(|(k, c)| {
            let name = names.get(*k).cloned().unwrap_or_else(|| format!("theta[{k}]"));
            format!("{c:+.3}*{name}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn symmetric_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| a.clone().try_inverse())
        .ok_or_else(|| Error::Singular("matrix is not invertible".into()))
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}
