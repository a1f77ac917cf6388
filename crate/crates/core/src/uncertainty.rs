//! Fisher information, the covariance of the unknowns, and the residual and
//! estimate covariances of the stacked observations `d_i = [r_i; b_i]`.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimator::{assemble, assemble_at_truth, u_index, v_index, EvaluationPoint, LinearizedSystem, PoseState};
use crate::linalg::{symmetrize, SpdFactor};
use crate::model::{FeatureNoise, MeasurementSet, Scenario};
use crate::montecarlo::GaussianSampler3;

pub type Matrix6x3 = SMatrix<f64, 6, 3>;

/// Fisher information at scenario truth.
pub fn fisher_information(scenario: &Scenario) -> DMatrix<f64> {
    assemble_at_truth(scenario, &scenario.exact_measurements()).information
}

/// `F^-1`, symmetrized.
pub fn covariance_of_unknowns(information: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(SpdFactor::new(information)?.inverse())
}

/// `C = R S^T Q^-1`, the map from a constraint residual to the direction correction.
pub fn observation_gain(noise: &FeatureNoise, s: &SMatrix<f64, 3, 6>, q: &Matrix3<f64>) -> Result<Matrix6x3> {
    let q_inv = q.try_inverse().ok_or(Error::IllConditioned { rcond: 0.0 })?;
    Ok(noise.direction_covariance() * s.transpose() * q_inv)
}

/// [`observation_gain`] for feature `i` of a linearized system.
pub fn observation_gain_at(sys: &LinearizedSystem, i: usize) -> Result<Matrix6x3> {
    observation_gain(&sys.noise[i], &sys.constraint_jacobian[i], &sys.q_lambda[i])
}

fn design_sandwich(sys: &LinearizedSystem, i: usize, cov_x: &DMatrix<f64>) -> Matrix3<f64> {
    let g = &sys.design[i];
    let m = g * cov_x * g.transpose();
    Matrix3::from_fn(|r, c| m[(r, c)])
}

fn symmetrize6(m: &Matrix6<f64>) -> Matrix6<f64> {
    (m + m.transpose()) * 0.5
}

/// Covariance of `d~_i - d_hat_i`: `C (Q - G F^-1 G^T) C^T`.
pub fn residual_covariance(sys: &LinearizedSystem, i: usize, cov_x: &DMatrix<f64>) -> Result<Matrix6<f64>> {
    let c = observation_gain_at(sys, i)?;
    let inner = sys.q_lambda[i] - design_sandwich(sys, i, cov_x);
    Ok(symmetrize6(&(c * inner * c.transpose())))
}

/// Covariance of `d_hat_i - d_i`:
/// `R + C (Q + G F^-1 G^T) C^T - (C S R + R S^T C^T)`.
pub fn estimate_covariance(sys: &LinearizedSystem, i: usize, cov_x: &DMatrix<f64>) -> Result<Matrix6<f64>> {
    let c = observation_gain_at(sys, i)?;
    let r = sys.noise[i].direction_covariance();
    let s = sys.constraint_jacobian[i];
    let inner = sys.q_lambda[i] + design_sandwich(sys, i, cov_x);
    let cross = c * s * r;
    Ok(symmetrize6(&(r + c * inner * c.transpose() - cross - cross.transpose())))
}

/// Information, covariance and per-feature observation covariances at one
/// evaluation point.
#[derive(Debug, Clone)]
pub struct UncertaintyReport {
    pub mode: EvaluationPoint,
    pub information: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub gains: Vec<Matrix6x3>,
    pub residual_covariance: Vec<Matrix6<f64>>,
    pub estimate_covariance: Vec<Matrix6<f64>>,
}

impl UncertaintyReport {
    pub fn from_system(sys: &LinearizedSystem) -> Result<Self> {
        let covariance = covariance_of_unknowns(&sys.information)?;
        let n = sys.len();
        let mut gains = Vec::with_capacity(n);
        let mut residual = Vec::with_capacity(n);
        let mut estimate = Vec::with_capacity(n);
        for i in 0..n {
            gains.push(observation_gain_at(sys, i)?);
            residual.push(residual_covariance(sys, i, &covariance)?);
            estimate.push(estimate_covariance(sys, i, &covariance)?);
        }
        Ok(UncertaintyReport {
            mode: sys.mode,
            information: sys.information.clone(),
            covariance,
            gains,
            residual_covariance: residual,
            estimate_covariance: estimate,
        })
    }

    /// Evaluated at scenario truth; the reference for Monte Carlo validation.
    pub fn at_truth(scenario: &Scenario) -> Result<Self> {
        Self::from_system(&assemble_at_truth(scenario, &scenario.exact_measurements()))
    }

    /// Evaluated at an estimate with measured directions; what a deployed solver reports.
    pub fn at_estimate(meas: &MeasurementSet, noise: &[FeatureNoise], state: &PoseState) -> Result<Self> {
        Self::from_system(&assemble(meas, noise, state))
    }

    /// Per-component standard deviations of the unknowns.
    pub fn sigmas(&self) -> DVector<f64> {
        self.covariance.diagonal().map(f64::sqrt)
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    /// `|D (F cov - I) D^-1|_inf` with `D = diag(F)^-1/2`, i.e. the defect of
    /// the Jacobi-equilibrated pair, which is free of the mixed units.
    pub fn inverse_defect(&self) -> f64 {
        let n = self.information.nrows();
        let d = self.information.diagonal().map(|x| 1.0 / x.sqrt());
        let mut e = &self.information * &self.covariance - DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                e[(i, j)] *= d[i] / d[j];
            }
        }
        e.amax()
    }
}

/// Samples `da = u db - v A dr` and returns the largest relative deviation of
/// the sample covariance diagonal from `Q_lambda`.
pub fn delta_a_covariance_check(scenario: &Scenario, i: usize, n_samples: usize, seed: u64) -> Result<f64> {
    let t = scenario.truth()[i];
    delta_a_deviation(scenario.attitude(), t.u, t.v, &scenario.noise()[i], n_samples, seed)
}

/// [`delta_a_covariance_check`] for a bare feature; zero direction
/// covariances are allowed and give an exactly zero deviation.
pub fn delta_a_deviation(
    attitude: &crate::Rotation,
    u: f64,
    v: f64,
    noise: &FeatureNoise,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 samples, got {n_samples}")));
    }
    let a = attitude.matrix();
    let q = crate::estimator::build_q_lambda(attitude, u, v, noise);
    let dr = GaussianSampler3::new(&noise.r_r)?;
    let db = GaussianSampler3::new(&noise.r_b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Matrix3::zeros();
    for _ in 0..n_samples {
        let da = db.sample(&mut rng) * u - a * dr.sample(&mut rng) * v;
        acc += da * da.transpose();
    }
    let sample = acc / n_samples as f64;
    Ok((0..3)
        .map(|k| if q[(k, k)] == 0.0 { sample[(k, k)].abs() } else { (sample[(k, k)] / q[(k, k)] - 1.0).abs() })
        .fold(0.0, f64::max))
}

/// Ratios of sampled to analytical variance, grouped by state block.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRatios {
    pub attitude: [f64; 3],
    pub position: [f64; 3],
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl EfficiencyRatios {
    pub fn pose(&self) -> impl Iterator<Item = f64> + '_ {
        self.attitude.iter().chain(&self.position).copied()
    }

    pub fn depths(&self) -> impl Iterator<Item = f64> + '_ {
        self.u.iter().chain(&self.v).copied()
    }

    pub fn all_within(&self, lo: f64, hi: f64) -> bool {
        self.pose().chain(self.depths()).all(|r| (lo..=hi).contains(&r))
    }
}

/// `diag(sample) / diag(F^-1)` per block.
pub fn crlb_equality_check(analytical: &DMatrix<f64>, sample: &DMatrix<f64>) -> Result<EfficiencyRatios> {
    let dim = analytical.nrows();
    if dim < 6 || (dim - 6) % 2 != 0 || sample.shape() != analytical.shape() {
        return Err(Error::InvalidArgument("covariance shapes do not match a packed error state".into()));
    }
    let ratio = |k: usize| sample[(k, k)] / analytical[(k, k)];
    let n = (dim - 6) / 2;
    Ok(EfficiencyRatios {
        attitude: [ratio(0), ratio(1), ratio(2)],
        position: [ratio(3), ratio(4), ratio(5)],
        u: (0..n).map(|i| ratio(u_index(i))).collect(),
        v: (0..n).map(|i| ratio(v_index(i))).collect(),
    })
}

/// Second moment about zero of a set of equally long vectors.
pub fn second_moment(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let dim = samples.first().map_or(0, |s| s.len());
    let mut acc = DMatrix::zeros(dim, dim);
    for s in samples {
        acc.ger(1.0, s, s, 1.0);
    }
    symmetrize(&(acc / samples.len().max(1) as f64))
}
