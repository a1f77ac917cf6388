//! Rotation matrices and the exponential/logarithm maps of SO(3).
//!
//! Attitude errors follow the left-multiplicative convention
//! `A_hat = exp(-[dalpha x]) * A`, so the error vector of an estimate is
//! `-log(A_hat * A^T)`.

use nalgebra::{Matrix3, Vector3, SVD};

use crate::error::{Error, Result};

/// Orthonormality tolerance accepted by [`Rotation::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-12;

/// Matrices this close to orthonormal are projected back onto SO(3) by
/// [`Rotation::from_matrix_projected`].
pub const PROJECTION_TOLERANCE: f64 = 1e-6;

/// Angles within this distance of pi have an ambiguous log-map axis sign.
pub const NEAR_PI_TOLERANCE: f64 = 1e-9;

/// Cross-product matrix: `skew(w) * x == w.cross(&x)`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// A proper orthonormal 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates `m` against [`ROTATION_TOLERANCE`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let (orthonormality, det) = Self::defect(&m);
        if orthonormality > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation { orthonormality, det });
        }
        Ok(Rotation(m))
    }

    /// Accepts matrices within [`PROJECTION_TOLERANCE`] of SO(3) and replaces them
    /// by the orthogonal polar factor.
    pub fn from_matrix_projected(m: Matrix3<f64>) -> Result<Self> {
        let (orthonormality, det) = Self::defect(&m);
        if orthonormality > PROJECTION_TOLERANCE || (det - 1.0).abs() > PROJECTION_TOLERANCE {
            return Err(Error::InvalidRotation { orthonormality, det });
        }
        Ok(Rotation(polar_rotation(&m)))
    }

    fn defect(m: &Matrix3<f64>) -> (f64, f64) {
        let orthonormality = (m * m.transpose() - Matrix3::identity()).norm();
        (orthonormality, m.determinant())
    }

    /// Wraps `m` without validation. Callers guarantee orthonormality.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn rotate(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * x
    }

    /// Re-projects onto SO(3); used after long chains of products.
    pub fn renormalized(&self) -> Self {
        Rotation(polar_rotation(&self.0))
    }

    /// Rodrigues formula for `exp([w x])`.
    pub fn exp(w: &Vector3<f64>) -> Self {
        exp_so3(w)
    }

    /// Principal-branch logarithm, see [`log_so3`].
    pub fn log(&self) -> Result<Vector3<f64>> {
        log_so3(self)
    }

    /// Roll, pitch and yaw (radians) of the z-y-x Euler decomposition
    /// `M = Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn roll_pitch_yaw(&self) -> Vector3<f64> {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        Vector3::new(roll, pitch, yaw)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Closest proper rotation to `m` in the Frobenius norm.
pub(crate) fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Exponential map `exp([w x])` via the Rodrigues formula.
pub fn exp_so3(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    // sin(t)/t and (1-cos(t))/t^2, Taylor-expanded near zero
    let (a, b) = if theta < 1e-4 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = skew(w);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map on the principal branch (`|w| <= pi`).
///
/// Within [`NEAR_PI_TOLERANCE`] of pi the axis sign cannot be recovered and
/// [`Error::DegenerateAxis`] is returned; its candidate takes the column of
/// `(R + R^T)/2 + I` with the largest diagonal entry, normalized, with a
/// non-negative component on that diagonal index (first index wins ties).
pub fn log_so3(r: &Rotation) -> Result<Vector3<f64>> {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let antisym = vee(m);

    if theta < 1e-6 {
        return Ok(antisym * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta > 1e-3 {
        return Ok(antisym * (theta / theta.sin()));
    }

    // Near pi: recover the axis from the symmetric part,
    // a a^T = (R + R^T - 2I) / (2 (1 - cos)) + I.
    let sym = (m + m.transpose()) * 0.5;
    let outer = (sym - Matrix3::identity()) / (1.0 - cos_theta) + Matrix3::identity();
    let mut k = 0;
    for j in 1..3 {
        if outer[(j, j)] > outer[(k, k)] {
            k = j;
        }
    }
    let mut axis: Vector3<f64> = outer.column(k).into_owned();
    axis /= axis.norm();

    if std::f64::consts::PI - theta < NEAR_PI_TOLERANCE {
        if axis[k] < 0.0 {
            axis = -axis;
        }
        return Err(Error::DegenerateAxis {
            candidate: axis * theta,
            tolerance: NEAR_PI_TOLERANCE,
        });
    }
    // vee(R) = sin(theta) * axis fixes the sign.
    if axis.dot(&antisym) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn skew_basics() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        let z = skew(&Vector3::new(0.0, 0.0, 1.0)) * Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(z, Vector3::new(0.0, 1.0, 0.0));
        let s = skew(&Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(s + s.transpose(), Matrix3::zeros());
    }

    #[test]
    fn exp_of_zero_and_quarter_turn() {
        assert_eq!(*exp_so3(&Vector3::zeros()).matrix(), Matrix3::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_abs_diff_eq!(
            r * Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn exp_matches_first_order_for_tiny_angles() {
        let w = Vector3::new(1e-6, 2e-6, -1e-6);
        let first = Matrix3::identity() + skew(&w);
        let diff = exp_so3(&w).matrix() - first;
        assert!(diff.amax() <= 1e-11, "{diff}");
    }

    #[test]
    fn log_identity_and_round_trip() {
        assert_eq!(log_so3(&Rotation::identity()).unwrap(), Vector3::zeros());
        let w = Vector3::new(0.1, -0.2, 0.3);
        assert_abs_diff_eq!(log_so3(&exp_so3(&w)).unwrap(), w, epsilon = 1e-12);
    }

    #[test]
    fn log_of_reference_attitude() {
        // [[c, s, 0], [-s, c, 0], [0, 0, 1]] is a -pi/4 turn about z.
        let (s, c) = FRAC_PI_4.sin_cos();
        let a = Rotation::new(Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let w = log_so3(&a).unwrap();
        assert_abs_diff_eq!(w, Vector3::new(0.0, 0.0, -FRAC_PI_4), epsilon = 1e-15);
        assert_abs_diff_eq!(*exp_so3(&w).matrix(), *a.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn log_near_pi_resolves_sign_and_flags_exact_pi() {
        let w = Vector3::new(0.3, -0.5, 0.8).normalize() * (PI - 1e-5);
        let back = log_so3(&exp_so3(&w)).unwrap();
        assert_abs_diff_eq!(back, w, epsilon = 1e-9);

        let half_turn = exp_so3(&Vector3::new(0.0, -PI, 0.0));
        match log_so3(&half_turn) {
            Err(Error::DegenerateAxis { candidate, .. }) => {
                assert_abs_diff_eq!(candidate, Vector3::new(0.0, PI, 0.0), epsilon = 1e-12);
            }
            other => panic!("expected degenerate axis, got {other:?}"),
        }
    }

    #[test]
    fn construction_tolerances() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-9;
        assert!(Rotation::new(m).is_err());
        let r = Rotation::from_matrix_projected(m).unwrap();
        let (o, d) = Rotation::defect(r.matrix());
        assert!(o < 1e-14 && (d - 1.0).abs() < 1e-14);
        m[(0, 1)] = 1e-3;
        assert!(Rotation::from_matrix_projected(m).is_err());
        assert!(Rotation::new(-Matrix3::identity()).is_err());
    }

    #[test]
    fn roll_pitch_yaw_recovers_angles() {
        let (roll, pitch, yaw) = (0.1, -0.2, 0.3);
        let m = *exp_so3(&Vector3::new(0.0, 0.0, yaw)).matrix()
            * exp_so3(&Vector3::new(0.0, pitch, 0.0)).matrix()
            * exp_so3(&Vector3::new(roll, 0.0, 0.0)).matrix();
        let rpy = Rotation::new(m).unwrap().roll_pitch_yaw();
        assert_abs_diff_eq!(rpy, Vector3::new(roll, pitch, yaw), epsilon = 1e-14);
    }

    fn small_vec(bound: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-bound..bound, -bound..bound, -bound..bound).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn exp_log_round_trip(w in small_vec(3.0).prop_filter("norm <= 3", |w| w.norm() <= 3.0)) {
            let back = log_so3(&exp_so3(&w)).unwrap();
            prop_assert!((back - w).amax() <= 1e-9);
        }

        #[test]
        fn rotations_are_isometries(w in small_vec(3.0), x in small_vec(10.0), y in small_vec(10.0)) {
            let r = exp_so3(&w);
            prop_assert!(((r * x).dot(&(r * y)) - x.dot(&y)).abs() <= 1e-12 * (1.0 + x.norm() * y.norm()));
            prop_assert!(Rotation::new(*r.matrix()).is_ok());
        }

        #[test]
        fn skew_is_antisymmetric(w in small_vec(100.0)) {
            prop_assert_eq!(skew(&w).transpose(), -skew(&w));
        }
    }
}
