//! Small dense linear-algebra helpers shared by the model and solver code.

use nalgebra::DMatrix;

use crate::error::{MmvError, Result};

/// Relative threshold below which a covariance eigenvalue counts as zero.
pub const NEAR_SINGULAR_REL: f64 = 1e-12;

pub(crate) fn check_square(m: &DMatrix<f64>, n: usize, name: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(MmvError::InvalidModel(format!(
            "{name} must be {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(MmvError::InvalidModel(format!("{name} has non-finite entries")));
    }
    Ok(())
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(MmvError::InvalidModel(format!(
                    "{name} is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Rejects matrices whose smallest eigenvalue is below `1e-12 * trace`.
pub(crate) fn pd_factor(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    check_symmetric(m, name)?;
    let trace = m.trace();
    let min_eig = min_eigenvalue(m);
    if !(trace > 0.0) || min_eig < NEAR_SINGULAR_REL * trace {
        return Err(MmvError::InvalidModel(format!(
            "{name} is not positive definite (min eigenvalue {min_eig:.3e}, trace {trace:.3e})"
        )));
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| MmvError::InvalidModel(format!("{name}: Cholesky factorization failed")))
}

/// A square-root factor `F` with `F Fᵀ = m` for a symmetric positive
/// semidefinite matrix. Uses Cholesky when possible and falls back to the
/// eigendecomposition for singular matrices (including the zero matrix).
pub(crate) fn psd_factor(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    check_symmetric(m, name)?;
    let n = m.nrows();
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let eig = m.clone().symmetric_eigen();
    let scale = m.trace().abs().max(m.amax());
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 * scale {
        return Err(MmvError::InvalidModel(format!(
            "{name} is not positive semidefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    if let Some(ch) = m.clone().cholesky() {
        if min_eig > NEAR_SINGULAR_REL * scale {
            return Ok(ch.l());
        }
    }
    let mut f = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            f[(i, j)] *= s;
        }
    }
    Ok(f)
}

/// Spectral radius of a general square matrix.
pub(crate) fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(MmvError::InvalidModel(format!("{name}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Serde adapters storing matrices as arrays of rows.
pub(crate) mod serde_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(super::to_rows(m))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows, "matrix").map_err(serde::de::Error::custom)
    }
}

pub(crate) mod serde_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
