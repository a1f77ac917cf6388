//! Scenario and measurement data model.
//!
//! Each feature relates a reference-frame line of sight `r` with depth `v` to
//! a body-frame line of sight `b` with depth `u` through
//! `u * b = v * A * r - p`.

use nalgebra::{Matrix3, Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::so3::Rotation;

/// Smallest admissible number of features.
pub const MIN_FEATURES: usize = 3;

const UNIT_TOLERANCE: f64 = 1e-12;
const CONSTRAINT_TOLERANCE: f64 = 1e-9;
const SYMMETRY_TOLERANCE: f64 = 1e-14;

/// Ground truth for one feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureTruth {
    /// Reference-frame line of sight (unit).
    pub r: Vector3<f64>,
    /// Body-frame line of sight (unit).
    pub b: Vector3<f64>,
    /// Body-frame depth, meters.
    pub u: f64,
    /// Reference-frame depth, meters.
    pub v: f64,
}

/// Measurement noise of one feature. Direction and depth errors are
/// mutually uncorrelated and uncorrelated across features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureNoise {
    pub r_r: Matrix3<f64>,
    pub r_b: Matrix3<f64>,
    pub r_u: f64,
    pub r_v: f64,
}

impl FeatureNoise {
    /// Isotropic direction noise `sigma^2 I` on both lines of sight.
    pub fn isotropic(direction_variance: f64, r_u: f64, r_v: f64) -> Self {
        FeatureNoise {
            r_r: Matrix3::identity() * direction_variance,
            r_b: Matrix3::identity() * direction_variance,
            r_u,
            r_v,
        }
    }

    /// Block-diagonal covariance of the stacked direction vector `[r; b]`.
    pub fn direction_covariance(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r_r);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.r_b);
        m
    }

    /// Checks symmetry and strict positive definiteness of every block.
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("R_r", &self.r_r), ("R_b", &self.r_b)] {
            let scale = m.amax().max(f64::MIN_POSITIVE);
            if (m - m.transpose()).amax() > SYMMETRY_TOLERANCE * scale {
                return Err(Error::InvalidNoiseModel(format!("{name} is not symmetric")));
            }
            let min_eig = m.symmetric_eigenvalues().min();
            if !(min_eig > 0.0) {
                return Err(Error::InvalidNoiseModel(format!(
                    "{name} is not positive definite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        for (name, x) in [("R_u", self.r_u), ("R_v", self.r_v)] {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::InvalidNoiseModel(format!("{name} must be positive, got {x}")));
            }
        }
        Ok(())
    }
}

/// Completes a feature from the reference side: returns `(b, u)` with
/// `u = |v A r - p|` and `b = (v A r - p) / u`.
pub fn complete_feature(
    attitude: &Rotation,
    position: &Vector3<f64>,
    r: &Vector3<f64>,
    v: f64,
) -> Result<(Vector3<f64>, f64)> {
    let ray = attitude.rotate(r) * v - position;
    let u = ray.norm();
    if u <= 1e-12 {
        return Err(Error::DegenerateGeometry(
            "camera center coincides with the feature".into(),
        ));
    }
    Ok((ray / u, u))
}

/// Residual of the projection constraint, `u b - v A r + p`.
pub fn projection_residual(
    attitude: &Rotation,
    position: &Vector3<f64>,
    r: &Vector3<f64>,
    b: &Vector3<f64>,
    u: f64,
    v: f64,
) -> Vector3<f64> {
    b * u - attitude.rotate(r) * v + position
}

/// Ground-truth pose, per-feature truth and noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    attitude: Rotation,
    position: Vector3<f64>,
    truth: Vec<FeatureTruth>,
    noise: Vec<FeatureNoise>,
}

impl Scenario {
    /// Validates the feature count, unit directions, the projection
    /// constraint and every noise block.
    pub fn new(
        attitude: Rotation,
        position: Vector3<f64>,
        features: Vec<(FeatureTruth, FeatureNoise)>,
    ) -> Result<Self> {
        if features.len() < MIN_FEATURES {
            return Err(Error::InvalidScenario(format!(
                "need at least {MIN_FEATURES} features, got {}",
                features.len()
            )));
        }
        let (truth, noise): (Vec<_>, Vec<_>) = features.into_iter().unzip();
        for (i, (t, n)) in truth.iter().zip(&noise).enumerate() {
            if (t.r.norm() - 1.0).abs() > UNIT_TOLERANCE || (t.b.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidScenario(format!(
                    "feature {i}: line-of-sight vectors must be unit length"
                )));
            }
            if !(t.u > 0.0 && t.v > 0.0) {
                return Err(Error::InvalidScenario(format!("feature {i}: depths must be positive")));
            }
            let res = projection_residual(&attitude, &position, &t.r, &t.b, t.u, t.v).norm();
            if res > CONSTRAINT_TOLERANCE * t.u.max(t.v) {
                return Err(Error::InvalidScenario(format!(
                    "feature {i}: projection constraint violated by {res:e}"
                )));
            }
            n.validate()
                .map_err(|e| Error::InvalidScenario(format!("feature {i}: {e}")))?;
        }
        Ok(Scenario { attitude, position, truth, noise })
    }

    /// Builds a scenario whose body-side truth is completed from `(r, v)`.
    pub fn from_reference_side(
        attitude: Rotation,
        position: Vector3<f64>,
        features: Vec<(Vector3<f64>, f64, FeatureNoise)>,
    ) -> Result<Self> {
        let mut completed = Vec::with_capacity(features.len());
        for (r, v, noise) in features {
            let (b, u) = complete_feature(&attitude, &position, &r, v)?;
            completed.push((FeatureTruth { r, b, u, v }, noise));
        }
        Self::new(attitude, position, completed)
    }

    pub fn attitude(&self) -> &Rotation {
        &self.attitude
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn truth(&self) -> &[FeatureTruth] {
        &self.truth
    }

    pub fn noise(&self) -> &[FeatureNoise] {
        &self.noise
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Dimension of the packed error state, `6 + 2n`.
    pub fn state_dim(&self) -> usize {
        6 + 2 * self.len()
    }

    pub fn constraint_residual(&self, i: usize) -> Vector3<f64> {
        let t = &self.truth[i];
        projection_residual(&self.attitude, &self.position, &t.r, &t.b, t.u, t.v)
    }

    /// Same geometry with every noise block replaced by `f(i, noise)`.
    pub fn map_noise(&self, f: impl Fn(usize, &FeatureNoise) -> FeatureNoise) -> Result<Self> {
        let features = self
            .truth
            .iter()
            .zip(&self.noise)
            .enumerate()
            .map(|(i, (t, n))| (*t, f(i, n)))
            .collect();
        Self::new(self.attitude, self.position, features)
    }

    /// The first `n` features only.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let features = self.truth.iter().copied().zip(self.noise.iter().copied()).take(n).collect();
        Self::new(self.attitude, self.position, features)
    }

    /// Noise-free measurements.
    pub fn exact_measurements(&self) -> MeasurementSet {
        MeasurementSet {
            features: self
                .truth
                .iter()
                .map(|t| Measurement { r: t.r, b: t.b, u: t.u, v: t.v })
                .collect(),
        }
    }
}

/// One noisy observation. Directions are not renormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub r: Vector3<f64>,
    pub b: Vector3<f64>,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub features: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}
