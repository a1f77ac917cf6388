//! Closed-form starting point for the iterative solver.
//!
//! Two attitude seeds are tried: rigid registration of the depth-scaled
//! points `u~ b~ ~ A (v~ r~) - p` (exact on noise-free data), and Wahba's
//! problem on the bare lines of sight (insensitive to the large virtual-depth
//! noise). Each seed gets its translation and depths from the weighted
//! linear problem at fixed attitude, starting from equal nominal depths and
//! re-weighting a few times; the seed with the lower reduced cost wins.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, SVD};

use super::system::{build_q_lambda, reduced_cost, state_dim, PoseState};
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{FeatureNoise, MeasurementSet, MIN_FEATURES};
use crate::so3::Rotation;

const RANK_TOLERANCE: f64 = 1e-9;
const REFINEMENT_ROUNDS: usize = 4;
/// Smallest depth, as a fraction of the nominal one, used to build the
/// weights of the linear position/depth solve.
const WEIGHT_FLOOR: f64 = 0.1;

/// Proper rotation maximizing `tr(A^T B)` for a 3x3 correlation matrix `B`.
fn proper_rotation_from_correlation(b: &Matrix3<f64>) -> Rotation {
    let svd = SVD::new(*b, true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    Rotation::from_matrix_unchecked(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t)
}

fn second_singular_ratio(m: &Matrix3<f64>) -> f64 {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] == 0.0 {
        0.0
    } else {
        s[1] / s[0]
    }
}

/// Depth-scaled rigid registration. `None` when a measured depth is not
/// positive or the centered point cloud is rank deficient.
pub fn register_points(meas: &MeasurementSet) -> Option<(Rotation, Vector3<f64>)> {
    if meas.features.iter().any(|m| !(m.u > 0.0 && m.v > 0.0)) {
        return None;
    }
    let n = meas.len() as f64;
    let xs: Vec<_> = meas.features.iter().map(|m| m.r * m.v).collect();
    let ys: Vec<_> = meas.features.iter().map(|m| m.b * m.u).collect();
    let x_bar = xs.iter().sum::<Vector3<f64>>() / n;
    let y_bar = ys.iter().sum::<Vector3<f64>>() / n;
    // correlation of target with source: maximize sum (y - y_bar)^T A (x - x_bar)
    let corr: Matrix3<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - y_bar) * (x - x_bar).transpose())
        .sum();
    if second_singular_ratio(&corr) <= RANK_TOLERANCE {
        return None;
    }
    let a = proper_rotation_from_correlation(&corr);
    let p = a.rotate(&x_bar) - y_bar;
    Some((a, p))
}

/// Wahba solution on the lines of sight alone.
pub fn align_directions(meas: &MeasurementSet) -> Result<Rotation> {
    let corr: Matrix3<f64> = meas.features.iter().map(|m| m.b * m.r.transpose()).sum();
    if second_singular_ratio(&corr) <= RANK_TOLERANCE {
        return Err(Error::DegenerateConfiguration(
            "lines of sight are collinear; attitude is unobservable".into(),
        ));
    }
    Ok(proper_rotation_from_correlation(&corr))
}

/// Position and depths at fixed attitude.
///
/// With the constraint weights frozen the residual is linear and homogeneous
/// in `(p, u, v)`, and the exact constraint term is invariant to a common
/// scale of all three. The shape is therefore taken from the weighted
/// homogeneous problem, normalized against the depth measurements, and the
/// scale from the depth priors alone.
fn solve_translation_and_depths(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    state: &PoseState,
    weight_floor: f64,
) -> Result<PoseState> {
    let n = meas.len();
    let dim = state_dim(n) - 3;
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    let mut c = DVector::<f64>::zeros(dim);
    let mut prior = DVector::<f64>::zeros(dim);
    for (i, (f, nz)) in meas.features.iter().zip(noise).enumerate() {
        // Q shrinks with the depths; a feature whose depths sit near zero
        // would otherwise dominate and pull every other depth down with it
        let (u, v) = (state.u[i].max(weight_floor), state.v[i].max(weight_floor));
        let q_inv = invert_weight(&build_q_lambda(&state.attitude, u, v, nz))?;
        let ar = state.attitude.rotate(&f.r);
        let cols = [(3 + 2 * i, f.b), (4 + 2 * i, -ar)];
        // p-p block
        m.fixed_view_mut::<3, 3>(0, 0).add_assign(&q_inv);
        for &(k, jk) in &cols {
            let qj = q_inv * jk;
            m.fixed_view_mut::<3, 1>(0, k).add_assign(&qj);
            m.fixed_view_mut::<1, 3>(k, 0).add_assign(&qj.transpose());
            for &(l, jl) in &cols {
                m[(k, l)] += jk.dot(&(q_inv * jl));
            }
        }
        c[3 + 2 * i] = f.u / nz.r_u;
        c[4 + 2 * i] = f.v / nz.r_v;
        prior[3 + 2 * i] = 1.0 / nz.r_u;
        prior[4 + 2 * i] = 1.0 / nz.r_v;
    }
    let shape = SpdFactor::new(&m)?.solve(&c);
    let norm = c.dot(&shape);
    let curvature = shape.component_mul(&shape).dot(&prior);
    if !(norm > 0.0 && curvature > 0.0) {
        return Err(Error::DegenerateConfiguration(
            "depth measurements do not fix the scale".into(),
        ));
    }
    let x = shape * (norm / curvature);
    let mut out = state.clone();
    out.position = Vector3::new(x[0], x[1], x[2]);
    for i in 0..n {
        out.u[i] = x[3 + 2 * i];
        out.v[i] = x[4 + 2 * i];
    }
    Ok(out)
}

fn invert_weight(q: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    q.cholesky().map(|c| c.inverse()).ok_or(Error::IllConditioned { rcond: 0.0 })
}

/// Alternates the linear position/depth solve with Wahba's problem on the
/// parallax-corrected lines of sight `u b~ + p`.
fn refine(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    mut state: PoseState,
    floor: f64,
    weight_floor: f64,
) -> Result<PoseState> {
    for _ in 0..REFINEMENT_ROUNDS {
        state = solve_translation_and_depths(meas, noise, &state, weight_floor)?;
        let corr: Matrix3<f64> = (0..meas.len())
            .map(|i| {
                let f = &meas.features[i];
                let target = f.b * state.u[i] + state.position;
                target.normalize() * f.r.transpose()
            })
            .sum();
        state.attitude = proper_rotation_from_correlation(&corr);
        for d in state.u.iter_mut().chain(state.v.iter_mut()) {
            *d = d.max(floor);
        }
    }
    solve_translation_and_depths(meas, noise, &state, weight_floor)
}

/// Refined starting points for [`super::solve`], lowest reduced cost first.
///
/// Seeds: rigid registration (when every measured depth is positive), and
/// Wahba's attitude with either equal nominal depths or the measured depths.
/// Each seed is refined at fixed attitude; a seed whose refinement fails or
/// raises the cost is kept as is.
pub fn initial_candidates(meas: &MeasurementSet, noise: &[FeatureNoise]) -> Result<Vec<PoseState>> {
    if meas.len() < MIN_FEATURES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_FEATURES} features, got {}",
            meas.len()
        )));
    }
    let wahba = align_directions(meas)?;
    let n = meas.len();
    // RMS of the measured depths sets the overall scale of the start
    let nominal = (meas.features.iter().map(|m| m.u * m.u + m.v * m.v).sum::<f64>() / (2 * n) as f64)
        .sqrt()
        .max(1e-6);
    let floor = 1e-3 * nominal;
    let weight_floor = WEIGHT_FLOOR * nominal;

    let mut seeds = Vec::with_capacity(3);
    if let Some((a, p)) = register_points(meas) {
        seeds.push(PoseState {
            attitude: a,
            position: p,
            u: meas.features.iter().map(|m| m.u).collect(),
            v: meas.features.iter().map(|m| m.v).collect(),
        });
    }
    seeds.push(PoseState {
        attitude: wahba.clone(),
        position: Vector3::zeros(),
        u: vec![nominal; n],
        v: vec![nominal; n],
    });
    seeds.push(PoseState {
        attitude: wahba,
        position: Vector3::zeros(),
        u: meas.features.iter().map(|m| m.u.max(floor)).collect(),
        v: meas.features.iter().map(|m| m.v.max(floor)).collect(),
    });

    let mut out: Vec<(f64, PoseState)> = Vec::with_capacity(seeds.len());
    let mut last_err = None;
    for seed in seeds {
        let seed_cost = reduced_cost(meas, noise, &seed);
        let refined = refine(meas, noise, seed.clone(), floor, weight_floor)
            .map(|s| (reduced_cost(meas, noise, &s), s))
            .inspect_err(|e| last_err = Some(e.to_string()));
        let pick = match refined {
            Ok((c, s)) if c < seed_cost && s.depths_positive() => (c, s),
            _ if seed.depths_positive() => (seed_cost, seed),
            _ => continue,
        };
        if pick.0.is_finite() {
            out.push(pick);
        }
    }
    if out.is_empty() {
        return Err(Error::DegenerateConfiguration(format!(
            "no usable starting point{}",
            last_err.map(|e| format!(" ({e})")).unwrap_or_default()
        )));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out.into_iter().map(|(_, s)| s).collect())
}

/// The lowest-cost refined starting point.
pub fn initialize(meas: &MeasurementSet, noise: &[FeatureNoise]) -> Result<PoseState> {
    Ok(initial_candidates(meas, noise)?.swap_remove(0))
}
