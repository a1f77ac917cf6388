//! Total-least-squares pose solver.
//!
//! The direction estimates are eliminated in closed form, leaving the reduced
//! cost over attitude, position and the `2n` virtual depths. Each iteration
//! solves `K dx = g` with `g` the exact negative gradient and `K` either the
//! exact Hessian (when positive definite) or the Fisher information `F`, the
//! Gauss-Newton normal matrix the uncertainty stack also uses.
//!
//! Plain Gauss-Newton on `F` converges only linearly here: along the joint
//! scale of position and depths the constraint term is exactly invariant, so
//! the only curvature there comes from the weak virtual-depth priors, and the
//! residual-dependent part of `F` overstates it several times over.
//! So each step tries the Newton direction, the `F` direction and a short
//! damping ladder, keeps the best, projects it along the flat valley, and
//! finally rescales the joint `(p, u, v)` scale to its closed-form optimum.

mod baseline;
mod init;
mod system;

pub use baseline::solve_ls_baseline;
pub use init::{align_directions, initial_candidates, initialize, register_points};
pub use system::{
    assemble, assemble_at_truth, build_q_lambda, constraint_jacobian, reduced_cost, state_dim,
    u_index, v_index, EvaluationPoint, LinearizedSystem, PoseState,
};

use nalgebra::{DVector, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::model::{FeatureNoise, MeasurementSet, MIN_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Convergence threshold on `|dx|_inf`.
    pub step_tolerance: f64,
    /// Convergence threshold on the relative cost decrease.
    pub cost_tolerance: f64,
    /// Step halving until the cost does not increase.
    pub line_search: bool,
    pub max_halvings: usize,
    pub curvature: Curvature,
    /// Include the variation of the constraint weights in the step's right-hand
    /// side. With it the fixed point is the exact minimizer of the reduced cost;
    /// without it the iteration is plain reweighted least squares.
    pub weight_variation: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 50,
            step_tolerance: 1e-10,
            cost_tolerance: 1e-12,
            line_search: true,
            max_halvings: 8,
            curvature: Curvature::Newton,
            weight_variation: true,
        }
    }
}

/// Matrix the step is solved against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Curvature {
    /// Exact Hessian when it is positive definite and yields descent, `F` otherwise.
    #[default]
    Newton,
    /// Always the Fisher information `F`.
    Fisher,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_tolerance > 0.0 && self.cost_tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one scoring step.
#[derive(Debug, Clone)]
pub struct GnStep {
    pub state: PoseState,
    /// Applied (possibly halved) step.
    pub delta: DVector<f64>,
    pub cost_before: f64,
    pub cost_after: f64,
    /// False when no halving produced a non-increasing cost; `state` is then unchanged.
    pub accepted: bool,
    pub halvings: usize,
}

/// Relative cost difference below which two starting points tie.
const COST_TIE: f64 = 1e-9;

/// Inner Newton iterations of [`project_onto_valley`].
const PROJECTION_ITERATIONS: usize = 10;

/// Levenberg-Marquardt factors tried when the undamped steps fail.
const DAMPING_LADDER: [f64; 5] = [1e-2, 1.0, 1e2, 1e4, 1e6];

enum LineSearch {
    Accepted(PoseState, DVector<f64>, f64, usize),
    NoDescent,
    NonPositiveDepth,
}

fn line_search(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    state: &PoseState,
    full: &DVector<f64>,
    cost_before: f64,
    config: &SolverConfig,
) -> LineSearch {
    let mut scale = 1.0;
    let mut depth_ok = false;
    for halvings in 0..=config.max_halvings {
        let delta = full * scale;
        let candidate = state.perturbed(&delta);
        if candidate.depths_positive() {
            depth_ok = true;
            let cost = reduced_cost(meas, noise, &candidate);
            if !config.line_search || cost <= cost_before {
                return LineSearch::Accepted(candidate, delta, cost, halvings);
            }
        }
        scale *= 0.5;
    }
    if depth_ok {
        LineSearch::NoDescent
    } else {
        LineSearch::NonPositiveDepth
    }
}

/// One step from `state`.
///
/// Halves the step while the depths are not positive or (with line search)
/// the cost increases. If no halving helps, `accepted` is false and the state
/// is returned unchanged.
pub fn gn_step(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    state: &PoseState,
    config: &SolverConfig,
) -> Result<GnStep> {
    let sys = assemble(meas, noise, state);
    let rhs = if config.weight_variation { &sys.gradient } else { &sys.data_gradient };
    let cost_before = reduced_cost(meas, noise, state);

    let mut directions = Vec::with_capacity(2 + DAMPING_LADDER.len());
    if config.curvature == Curvature::Newton && config.weight_variation {
        if let Ok(h) = SpdFactor::new(&sys.hessian) {
            directions.push(h.solve(rhs));
        }
    }
    let fisher = SpdFactor::new(&sys.information)?;
    directions.push(fisher.solve(rhs));
    let attitude_direction = (config.weight_variation && state.len() > 0).then(|| directions[0].clone());

    let mut depth_failure = true;
    // far from the minimum the quadratic model can be poor beyond the halving
    // range; fall back to increasingly damped steps
    let damped = DAMPING_LADDER.iter().filter_map(|&mu| {
        let mut k = sys.information.clone();
        for j in 0..k.nrows() {
            k[(j, j)] *= 1.0 + mu;
        }
        SpdFactor::new(&k).ok().map(|f| f.solve(rhs))
    });
    // a full undamped step is taken at once; otherwise every direction is
    // tried and the lowest cost wins, so a heavily halved Newton step cannot starve
    // the damped ones in curved valleys
    let mut best: Option<GnStep> = None;
    let undamped = directions.len();
    for (k, full) in directions.into_iter().chain(damped).enumerate() {
        match line_search(meas, noise, state, &full, cost_before, config) {
            LineSearch::Accepted(next, delta, cost_after, halvings) => {
                let step = GnStep { state: next, delta, cost_before, cost_after, accepted: true, halvings };
                if halvings == 0 && k < undamped {
                    return Ok(rescaled(meas, noise, state, step));
                }
                if best.as_ref().is_none_or(|b| cost_after < b.cost_after) {
                    best = Some(step);
                }
                depth_failure = false;
            }
            LineSearch::NoDescent => depth_failure = false,
            LineSearch::NonPositiveDepth => {}
        }
    }
    // Along the nearly flat valleys (few features, weak depth priors) the
    // valley floor is curved in these coordinates and every straight step
    // leaves it. Moving the attitude and re-minimizing position and depths
    // at that attitude follows the floor instead.
    if let Some(full) = attitude_direction {
        let mut scale = 1.0;
        for _ in 0..=config.max_halvings {
            let moved = state.perturbed(&(&full * scale));
            if let Some((next, cost_after)) = project_onto_valley(meas, noise, moved, config) {
                if cost_after < cost_before {
                    if best.as_ref().is_none_or(|b| cost_after < b.cost_after) {
                        let delta = next.error_from(state);
                        best = Some(GnStep { state: next, delta, cost_before, cost_after, accepted: true, halvings: 0 });
                    }
                    break;
                }
            }
            scale *= 0.5;
        }
    }
    if let Some(step) = best {
        return Ok(rescaled(meas, noise, state, step));
    }
    if depth_failure {
        return Err(Error::DepthPositivity { halvings: config.max_halvings });
    }
    Ok(GnStep {
        state: state.clone(),
        delta: DVector::zeros(state_dim(state.len())),
        cost_before,
        cost_after: cost_before,
        accepted: false,
        halvings: config.max_halvings,
    })
}

/// Moves an accepted step along the exact invariance of the constraint term,
/// `(p, u, v) -> s (p, u, v)`, to the scale the depth priors prefer.
///
/// A step can collapse the overall scale towards zero; straight steps then
/// need many iterations to recover it, while this is a closed form.
fn rescaled(meas: &MeasurementSet, noise: &[FeatureNoise], from: &PoseState, step: GnStep) -> GnStep {
    let Some(s) = step.state.optimal_scale(meas, noise) else { return step };
    let candidate = step.state.scaled(s);
    let cost = reduced_cost(meas, noise, &candidate);
    if cost < step.cost_after - COST_TIE * (1.0 + step.cost_after) {
        GnStep { delta: candidate.error_from(from), state: candidate, cost_after: cost, ..step }
    } else {
        step
    }
}

/// Newton iterations on position and depths alone at fixed attitude.
/// `None` when no positive-depth descent exists from `state`.
fn project_onto_valley(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    mut state: PoseState,
    config: &SolverConfig,
) -> Option<(PoseState, f64)> {
    if !state.depths_positive() {
        return None;
    }
    let mut cost = reduced_cost(meas, noise, &state);
    for _ in 0..PROJECTION_ITERATIONS {
        let sys = assemble(meas, noise, &state);
        let m = sys.dim() - 3;
        let g = sys.gradient.rows(3, m).into_owned();
        let block = |k: &nalgebra::DMatrix<f64>| SpdFactor::new(&k.view((3, 3), (m, m)).into_owned()).ok();
        let dir = block(&sys.hessian).or_else(|| block(&sys.information))?.solve(&g);
        let mut full = DVector::zeros(sys.dim());
        let mut scale = 1.0;
        let mut moved = None;
        for _ in 0..=config.max_halvings {
            full.rows_mut(3, m).copy_from(&(&dir * scale));
            let candidate = state.perturbed(&full);
            if candidate.depths_positive() {
                let c = reduced_cost(meas, noise, &candidate);
                if c <= cost {
                    moved = Some((candidate, c, (&dir * scale).amax()));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((next, c, step)) = moved else { break };
        state = next;
        cost = c;
        if step <= config.step_tolerance {
            break;
        }
    }
    cost.is_finite().then_some((state, cost))
}

struct Iterated {
    state: PoseState,
    cost: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn iterate(meas: &MeasurementSet, noise: &[FeatureNoise], mut state: PoseState, config: &SolverConfig) -> Result<Iterated> {
    let mut cost = reduced_cost(meas, noise, &state);
    let mut trace = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let step = gn_step(meas, noise, &state, config)?;
        iterations += 1;
        if !step.accepted {
            // no descent left at working precision
            converged = true;
            break;
        }
        let step_norm = step.delta.amax();
        state = step.state;
        cost = step.cost_after;
        let decrease = step.cost_before - cost;
        trace.push(cost);
        if step_norm <= config.step_tolerance || decrease <= config.cost_tolerance * step.cost_before {
            converged = true;
            break;
        }
    }
    Ok(Iterated { state, cost, iterations, converged, trace })
}

/// Estimated pose, depths and direction estimates.
#[derive(Debug, Clone)]
pub struct PoseSolution {
    pub state: PoseState,
    /// Per-feature `[r_hat; b_hat]`.
    pub directions: Vec<Vector6<f64>>,
    /// Per-feature Lagrange multipliers of the projection constraint.
    pub lambda: Vec<Vector3<f64>>,
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    /// Reduced cost at the initializer followed by every accepted iterate.
    pub cost_trace: Vec<f64>,
}

impl PoseSolution {
    pub fn r_hat(&self, i: usize) -> Vector3<f64> {
        self.directions[i].fixed_rows::<3>(0).into_owned()
    }

    pub fn b_hat(&self, i: usize) -> Vector3<f64> {
        self.directions[i].fixed_rows::<3>(3).into_owned()
    }

    /// Largest `|u_hat b_hat - v_hat A_hat r_hat + p_hat|` over features.
    pub fn max_constraint_violation(&self) -> f64 {
        (0..self.directions.len())
            .map(|i| {
                crate::model::projection_residual(
                    &self.state.attitude,
                    &self.state.position,
                    &self.r_hat(i),
                    &self.b_hat(i),
                    self.state.u[i],
                    self.state.v[i],
                )
                .norm()
            })
            .fold(0.0, f64::max)
    }
}

/// Direction estimates and multipliers at a given pose/depth state:
/// `lambda = Q^-1 (S d~ - p)` and `d_hat = d~ - R S^T lambda`.
pub fn recover_directions(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    state: &PoseState,
) -> Result<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
    let mut dirs = Vec::with_capacity(meas.len());
    let mut lambdas = Vec::with_capacity(meas.len());
    for (i, (m, n)) in meas.features.iter().zip(noise).enumerate() {
        let (u, v) = (state.u[i], state.v[i]);
        let s = constraint_jacobian(&state.attitude, u, v);
        let q = build_q_lambda(&state.attitude, u, v, n);
        let d_meas = Vector6::new(m.r.x, m.r.y, m.r.z, m.b.x, m.b.y, m.b.z);
        let chol = q
            .cholesky()
            .ok_or_else(|| Error::IllConditioned { rcond: 0.0 })?;
        let lambda = chol.solve(&(s * d_meas - state.position));
        let d_hat = d_meas - n.direction_covariance() * s.transpose() * lambda;
        dirs.push(d_hat);
        lambdas.push(lambda);
    }
    Ok((dirs, lambdas))
}

/// Iterates from every initializer candidate and keeps the lowest converged cost.
///
/// Hitting `max_iterations` is not an error: the last iterate is returned
/// with `converged = false`.
pub fn solve(meas: &MeasurementSet, noise: &[FeatureNoise], config: &SolverConfig) -> Result<PoseSolution> {
    config.validate()?;
    if meas.len() < MIN_FEATURES || noise.len() != meas.len() {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_FEATURES} features with one noise block each (got {} / {})",
            meas.len(),
            noise.len()
        )));
    }
    // every starting point is iterated; the lowest converged cost wins
    let mut best: Option<Iterated> = None;
    let mut last_err = None;
    for start in initial_candidates(meas, noise)? {
        match iterate(meas, noise, start, config) {
            Ok(run) => {
                // costs equal to roundoff are ties; earlier (better-seeded) starts win
                let better = best.as_ref().is_none_or(|b| {
                    let lower = run.cost < b.cost - COST_TIE * (1.0 + b.cost);
                    (run.converged && !b.converged) || (run.converged == b.converged && lower)
                });
                if better {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some(Iterated { state, cost, iterations, converged, trace }) = best else {
        return Err(last_err.expect("at least one starting point"));
    };
    let (directions, lambda) = recover_directions(meas, noise, &state)?;
    Ok(PoseSolution {
        state,
        directions,
        lambda,
        iterations,
        final_cost: cost,
        converged,
        cost_trace: trace,
    })
}
