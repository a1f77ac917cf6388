//! Ordinary weighted least squares with an error-free design matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

/// Weighted LS estimate `x = (H^T R^-1 H)^-1 H^T R^-1 y` and its covariance
/// `(H^T R^-1 H)^-1`.
pub fn solve_ls_baseline(
    design: &DMatrix<f64>,
    obs: &DVector<f64>,
    obs_cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = design.nrows();
    if obs.len() != m || obs_cov.nrows() != m || obs_cov.ncols() != m {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: H is {}x{}, y has {}, R is {}x{}",
            m,
            design.ncols(),
            obs.len(),
            obs_cov.nrows(),
            obs_cov.ncols()
        )));
    }
    if design.ncols() > m {
        return Err(Error::DegenerateConfiguration("more unknowns than observations".into()));
    }
    let weight = SpdFactor::new(obs_cov)
        .map_err(|_| Error::InvalidNoiseModel("observation covariance is not SPD".into()))?;
    let r_inv_h = DMatrix::from_columns(
        &design.column_iter().map(|c| weight.solve(&c.into_owned())).collect::<Vec<_>>(),
    );
    let normal = design.transpose() * &r_inv_h;
    let factor = SpdFactor::new(&normal)
        .map_err(|_| Error::DegenerateConfiguration("design matrix is rank deficient".into()))?;
    let x = factor.solve(&(r_inv_h.transpose() * obs));
    Ok((x, factor.inverse()))
}
