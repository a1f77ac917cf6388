//! Random scenario generation.
//!
//! Feature points are drawn as `N(0, sigma^2 I)` 3-vectors in the reference
//! frame; the normalized point is the line of sight and its norm (floored)
//! the reference depth. Direction covariances are `c^2 M M^T / lambda_max`
//! with `M` standard normal, so `c^2` is the largest eigenvalue. Depth
//! variances are `(eps |z|)^2` with `z` standard normal, redrawn until
//! `|z|` falls in [`DEPTH_SCALE_RANGE`].

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{complete_feature, FeatureNoise, Scenario, MIN_FEATURES};
use crate::so3::Rotation;

/// Draws of a whole scenario before giving up on degenerate geometry.
pub const MAX_DRAWS: usize = 100;

/// Admissible `|z|` for the depth-variance draw `(eps |z|)^2`.
pub const DEPTH_SCALE_RANGE: (f64, f64) = (0.2, 5.0);

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecipe {
    pub n_features: usize,
    /// Per-axis standard deviation of the feature points, meters.
    pub direction_sigma: f64,
    /// Square root of the largest direction-covariance eigenvalue, degrees.
    pub angle_coeff_deg: f64,
    /// Depth standard-deviation scale, meters.
    pub eps_uv: f64,
    /// Smallest truth depth, meters.
    pub depth_floor: f64,
    pub seed: u64,
    /// Fixed truth attitude; random when `None`.
    pub attitude: Option<Rotation>,
    /// Fixed truth position; `N(0, 1)` per axis when `None`.
    pub position: Option<Vector3<f64>>,
}

impl Default for GenerationRecipe {
    fn default() -> Self {
        GenerationRecipe {
            n_features: 6,
            direction_sigma: 100.0,
            angle_coeff_deg: 0.006,
            eps_uv: 190.0,
            depth_floor: 1.0,
            seed: 0,
            attitude: None,
            position: None,
        }
    }
}

impl GenerationRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.n_features < MIN_FEATURES {
            return Err(Error::InvalidArgument(format!(
                "n_features must be at least {MIN_FEATURES}, got {}",
                self.n_features
            )));
        }
        for (name, x) in [
            ("direction_sigma", self.direction_sigma),
            ("angle_coeff_deg", self.angle_coeff_deg),
            ("eps_uv", self.eps_uv),
            ("depth_floor", self.depth_floor),
        ] {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite, got {x}")));
            }
        }
        if let Some(p) = &self.position {
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidArgument("position must be finite".into()));
            }
        }
        Ok(())
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    Vector3::from_fn(|_, _| normal(rng))
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let q = Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
        if q.norm() > 1e-6 {
            let m = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
            return Rotation::from_matrix_projected(m).expect("unit quaternion yields a rotation");
        }
    }
}

/// `c^2 M M^T / lambda_max(M M^T)` with `M` standard normal.
pub fn random_direction_covariance<R: Rng + ?Sized>(rng: &mut R, coeff_rad: f64) -> Matrix3<f64> {
    loop {
        let m = Matrix3::from_fn(|_, _| normal(rng));
        let mmt = m * m.transpose();
        let mmt = (mmt + mmt.transpose()) * 0.5;
        let eig = mmt.symmetric_eigenvalues();
        // a near-singular draw would make a useless noise model
        if eig.min() > 1e-6 * eig.max() {
            return mmt * (coeff_rad * coeff_rad / eig.max());
        }
    }
}

fn depth_variance<R: Rng + ?Sized>(rng: &mut R, eps: f64) -> f64 {
    let (lo, hi) = DEPTH_SCALE_RANGE;
    loop {
        let z = normal(rng).abs();
        if (lo..=hi).contains(&z) {
            return (eps * z).powi(2);
        }
    }
}

fn draw<R: Rng + ?Sized>(recipe: &GenerationRecipe, rng: &mut R) -> Result<Scenario> {
    let attitude = recipe.attitude.clone().unwrap_or_else(|| random_rotation(rng));
    let position = recipe.position.unwrap_or_else(|| normal_vector(rng));
    let coeff = recipe.angle_coeff_deg.to_radians();
    let mut features = Vec::with_capacity(recipe.n_features);
    for _ in 0..recipe.n_features {
        let point = normal_vector(rng) * recipe.direction_sigma;
        let norm = point.norm();
        if norm == 0.0 {
            return Err(Error::DegenerateGeometry("zero feature point".into()));
        }
        let noise = FeatureNoise {
            r_r: random_direction_covariance(rng, coeff),
            r_b: random_direction_covariance(rng, coeff),
            r_u: depth_variance(rng, recipe.eps_uv),
            r_v: depth_variance(rng, recipe.eps_uv),
        };
        let r = point / norm;
        let v = norm.max(recipe.depth_floor);
        let (_, u) = complete_feature(&attitude, &position, &r, v)?;
        if u < recipe.depth_floor {
            return Err(Error::DegenerateGeometry("body depth below the floor".into()));
        }
        features.push((r, v, noise));
    }
    let rows: Matrix3<f64> = features.iter().map(|(r, _, _)| r * r.transpose()).sum();
    let eig = rows.symmetric_eigenvalues();
    if eig.min() <= 1e-6 * eig.max() {
        return Err(Error::DegenerateGeometry("lines of sight are nearly coplanar".into()));
    }
    Scenario::from_reference_side(attitude, position, features)
}

/// Draws a scenario; degenerate draws are repeated up to [`MAX_DRAWS`] times.
pub fn gen_scenario(recipe: &GenerationRecipe) -> Result<Scenario> {
    recipe.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut last = None;
    for _ in 0..MAX_DRAWS {
        match draw(recipe, &mut rng) {
            Ok(sc) => return Ok(sc),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::DegenerateGeometry(format!(
        "no valid scenario in {MAX_DRAWS} draws (last: {})",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}
