//! The bundled six-feature reference scenario.
//!
//! Attitude, position, reference lines of sight and reference depths are the
//! authoritative inputs; the body-side truth `(b, u)` is regenerated from the
//! projection constraint. Printed lines of sight are renormalized to unit
//! length. One printed direction covariance is slightly indefinite and is
//! repaired by lifting its small eigenvalues to `1e-4` of its largest.

use nalgebra::{Matrix3, Vector3};

use crate::model::{FeatureNoise, Scenario};
use crate::so3::Rotation;

/// Eigenvalue floor, relative to the largest eigenvalue, for repaired blocks.
pub const EIGEN_FLOOR: f64 = 1e-4;

const POSITION: [f64; 3] = [0.7512, 1.7783, 1.2231];

const LINES_OF_SIGHT: [[f64; 3]; 6] = [
    [0.6930, -0.0639, 0.7181],
    [0.5074, 0.8032, 0.3120],
    [0.1558, 0.0360, 0.9871],
    [-0.4723, -0.7507, -0.4618],
    [-0.9202, -0.3649, -0.1418],
    [-0.3115, 0.7715, 0.5548],
];

const DEPTHS: [f64; 6] = [125.1189, 36.2025, 282.3673, 246.9957, 118.8191, 70.1661];

const R_U: [f64; 6] = [1.5609e4, 1.2334e4, 1.2882e4, 9.9700e4, 4.8596e4, 1.0926e5];
const R_V: [f64; 6] = [1.9356e4, 6.2020e4, 8.1318e4, 3.1038e4, 1.1476e4, 4.7077e4];

// Row-major, in units of 1e-8 rad^2.
const R_R: [[f64; 9]; 6] = [
    [4.04, 2.53, -0.335, 2.53, 10.1, -5.75, -0.335, -5.75, 4.39],
    [0.15, -0.20, 0.36, -0.20, 4.24, -0.08, 0.36, -0.08, 3.37],
    [8.25, 0.41, 1.33, 0.41, 3.50, -2.01, 1.33, -2.01, 1.51],
    [8.84, -2.08, -0.06, -2.08, 0.55, -0.32, -0.06, -0.32, 2.10],
    [4.38, -1.93, -3.51, -1.93, 2.31, -0.74, -3.51, -0.74, 6.87],
    [7.16, 1.00, 3.01, 1.00, 0.46, 0.24, 3.01, 0.24, 1.36],
];

const R_B: [[f64; 9]; 6] = [
    [1.42, 1.44, -1.35, 1.44, 1.48, -1.46, -1.35, -1.46, 2.07],
    [5.06, 3.03, 1.18, 3.03, 3.22, 1.02, 1.18, 1.02, 1.57],
    [0.83, -0.51, -0.50, -0.51, 0.61, 0.67, -0.50, 0.67, 5.73],
    // upper triangle taken as authoritative
    [3.55, -1.53, 1.82, -1.53, 5.19, -0.06, 1.82, -0.06, 1.17],
    [14.5, 3.18, 8.50, 3.18, 0.80, 1.70, 8.50, 1.70, 5.94],
    [2.86, -1.04, -0.43, -1.04, 2.33, -1.49, -0.43, -1.49, 1.48],
];

/// The reference attitude: a quarter-pi turn, `[[c, s, 0], [-s, c, 0], [0, 0, 1]]`.
pub fn reference_attitude() -> Rotation {
    let (s, c) = std::f64::consts::FRAC_PI_4.sin_cos();
    Rotation::from_matrix_projected(Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0))
        .expect("reference attitude is orthonormal")
}

/// Symmetric matrix with eigenvalues below `EIGEN_FLOOR * lambda_max` raised to that floor.
pub fn lift_eigenvalues(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let floor = EIGEN_FLOOR * eig.eigenvalues.max();
    if eig.eigenvalues.min() >= floor {
        return *m;
    }
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    let out = eig.eigenvectors * Matrix3::from_diagonal(&lifted) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

fn block(rows: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(rows) * 1e-8
}

/// Noise blocks of the reference scenario, after repair.
pub fn reference_noise() -> Vec<FeatureNoise> {
    (0..6)
        .map(|i| FeatureNoise {
            r_r: lift_eigenvalues(&block(&R_R[i])),
            r_b: lift_eigenvalues(&block(&R_B[i])),
            r_u: R_U[i],
            r_v: R_V[i],
        })
        .collect()
}

/// The six-feature reference scenario with regenerated body-side truth.
pub fn reference_scenario() -> Scenario {
    let features = LINES_OF_SIGHT
        .iter()
        .zip(DEPTHS)
        .zip(reference_noise())
        .map(|((r, v), noise)| (Vector3::from_row_slice(r).normalize(), v, noise))
        .collect();
    Scenario::from_reference_side(reference_attitude(), Vector3::from(POSITION), features)
        .expect("reference scenario is valid")
}
