//! Dense SPD helpers shared by the solver and the uncertainty stack.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, SymmetricEigen};

use crate::error::{Error, Result};

/// Factorizations with an estimated reciprocal condition below this are rejected.
pub const MIN_RCOND: f64 = 1e-15;

/// `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization of a Jacobi-equilibrated SPD matrix.
///
/// `m = D^-1 (L L^T) D^-1` with `D = diag(1 / sqrt(m_kk))`. The state vector
/// mixes radians, meters and depth units, so the raw matrix spans many
/// orders of magnitude while the equilibrated one stays well conditioned.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
    rcond: f64,
}

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        let mut scale = DVector::zeros(n);
        for k in 0..n {
            let d = m[(k, k)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::IllConditioned { rcond: 0.0 });
            }
            scale[k] = 1.0 / d.sqrt();
        }
        let mut equilibrated = m.clone();
        for j in 0..n {
            for i in 0..n {
                equilibrated[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(symmetrize(&equilibrated)).ok_or(Error::IllConditioned { rcond: 0.0 })?;
        let diag = chol.l_dirty().diagonal();
        let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let rcond = (lo / hi).powi(2);
        if !(rcond >= MIN_RCOND) {
            return Err(Error::IllConditioned { rcond });
        }
        Ok(SpdFactor { chol, scale, rcond })
    }

    /// Cheap reciprocal-condition estimate of the equilibrated matrix from
    /// the Cholesky pivots.
    pub fn rcond_estimate(&self) -> f64 {
        self.rcond
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled = b.component_mul(&self.scale);
        self.chol.solve(&scaled).component_mul(&self.scale)
    }

    /// Symmetrized inverse.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inner = self.chol.inverse();
        let n = inner.nrows();
        let mut out = inner;
        for j in 0..n {
            for i in 0..n {
                out[(i, j)] *= self.scale[i] * self.scale[j];
            }
        }
        symmetrize(&out)
    }

    /// `log det m`, finite where `det` itself would under/overflow.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let inner: f64 = l.diagonal().iter().map(|x| 2.0 * x.ln()).sum();
        inner - 2.0 * self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

/// Ratio of the extreme singular values of a symmetric matrix.
pub fn rcond_symmetric(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x.abs()), hi.max(x.abs())));
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Square-root factor `L` with `L L^T = m` for a symmetric positive
/// semidefinite 3x3 matrix. Zero matrices give a zero factor.
pub fn psd_factor3(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let sym = symmetrize3(m);
    if sym == Matrix3::zeros() {
        return Ok(Matrix3::zeros());
    }
    if let Some(chol) = nalgebra::Cholesky::new(sym) {
        return Ok(chol.l());
    }
    let eig = sym.symmetric_eigen();
    let floor = -1e-12 * eig.eigenvalues.amax();
    if eig.eigenvalues.iter().any(|&l| l < floor) {
        return Err(Error::InvalidNoiseModel(format!(
            "covariance is not positive semidefinite (eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&roots))
}
