//! Reduced cost and its second-order model around a pose/depth state.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use crate::model::{FeatureNoise, MeasurementSet, Scenario};
use crate::so3::{exp_so3, log_so3, skew, Rotation};

/// Index of `delta u_i` in the packed error state.
pub const fn u_index(i: usize) -> usize {
    6 + 2 * i
}

/// Index of `delta v_i` in the packed error state.
pub const fn v_index(i: usize) -> usize {
    7 + 2 * i
}

/// Length of the packed error state for `n` features.
pub const fn state_dim(n: usize) -> usize {
    6 + 2 * n
}

/// Attitude, position and the two virtual depths of every feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseState {
    pub attitude: Rotation,
    pub position: Vector3<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PoseState {
    pub fn truth(scenario: &Scenario) -> Self {
        PoseState {
            attitude: *scenario.attitude(),
            position: *scenario.position(),
            u: scenario.truth().iter().map(|t| t.u).collect(),
            v: scenario.truth().iter().map(|t| t.v).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Applies a packed perturbation: `A <- exp(-[da x]) A`, everything else additive.
    pub fn perturbed(&self, delta: &DVector<f64>) -> PoseState {
        let da = Vector3::new(delta[0], delta[1], delta[2]);
        let dp = Vector3::new(delta[3], delta[4], delta[5]);
        PoseState {
            attitude: (exp_so3(&-da) * self.attitude).renormalized(),
            position: self.position + dp,
            u: self.u.iter().enumerate().map(|(i, u)| u + delta[u_index(i)]).collect(),
            v: self.v.iter().enumerate().map(|(i, v)| v + delta[v_index(i)]).collect(),
        }
    }

    /// Packed error of `self` relative to `reference`; inverse of [`PoseState::perturbed`].
    pub fn error_from(&self, reference: &PoseState) -> DVector<f64> {
        let n = self.len();
        let mut out = DVector::zeros(state_dim(n));
        let rel = Rotation::from_matrix_unchecked(self.attitude.matrix() * reference.attitude.matrix().transpose());
        let da = match log_so3(&rel) {
            Ok(w) => -w,
            Err(crate::Error::DegenerateAxis { candidate, .. }) => -candidate,
            Err(_) => unreachable!("log_so3 only fails near pi"),
        };
        out.fixed_rows_mut::<3>(0).copy_from(&da);
        out.fixed_rows_mut::<3>(3).copy_from(&(self.position - reference.position));
        for i in 0..n {
            out[u_index(i)] = self.u[i] - reference.u[i];
            out[v_index(i)] = self.v[i] - reference.v[i];
        }
        out
    }

    /// Position and depths scaled by `s`; the constraint term is invariant under this.
    pub fn scaled(&self, s: f64) -> PoseState {
        PoseState {
            attitude: self.attitude,
            position: self.position * s,
            u: self.u.iter().map(|u| u * s).collect(),
            v: self.v.iter().map(|v| v * s).collect(),
        }
    }

    /// Scale minimizing the depth-prior term along [`PoseState::scaled`];
    /// `None` when it is not positive.
    pub fn optimal_scale(&self, meas: &MeasurementSet, noise: &[FeatureNoise]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, (m, nz)) in meas.features.iter().zip(noise).enumerate() {
            num += m.u * self.u[i] / nz.r_u + m.v * self.v[i] / nz.r_v;
            den += self.u[i] * self.u[i] / nz.r_u + self.v[i] * self.v[i] / nz.r_v;
        }
        let s = num / den;
        (s > 0.0 && s.is_finite()).then_some(s)
    }

    pub fn depths_positive(&self) -> bool {
        self.u.iter().chain(&self.v).all(|&d| d > 0.0)
    }
}

/// Constraint weight `v^2 A R_r A^T + u^2 R_b`.
pub fn build_q_lambda(attitude: &Rotation, u: f64, v: f64, noise: &FeatureNoise) -> Matrix3<f64> {
    let a = attitude.matrix();
    let q = a * noise.r_r * a.transpose() * (v * v) + noise.r_b * (u * u);
    (q + q.transpose()) * 0.5
}

/// `S = [v A, -u I]`, the Jacobian of `v A r - u b` with respect to `[r; b]`.
pub fn constraint_jacobian(attitude: &Rotation, u: f64, v: f64) -> SMatrix<f64, 3, 6> {
    let mut s = SMatrix::<f64, 3, 6>::zeros();
    s.fixed_view_mut::<3, 3>(0, 0).copy_from(&(attitude.matrix() * v));
    s.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * -u));
    s
}

/// Reduced cost after eliminating the direction estimates:
/// `1/2 sum[(du)^2/R_u + (dv)^2/R_v + rho^T Q^-1 rho]`, `rho = u b~ - v A r~ + p`.
///
/// Returns `+inf` when a constraint weight is not positive definite.
pub fn reduced_cost(meas: &MeasurementSet, noise: &[FeatureNoise], state: &PoseState) -> f64 {
    let mut cost = 0.0;
    for (i, (m, n)) in meas.features.iter().zip(noise).enumerate() {
        let (u, v) = (state.u[i], state.v[i]);
        let du = m.u - u;
        let dv = m.v - v;
        let rho = m.b * u - state.attitude.rotate(&m.r) * v + state.position;
        let q = build_q_lambda(&state.attitude, u, v, n);
        let Some(chol) = q.cholesky() else {
            return f64::INFINITY;
        };
        cost += du * du / n.r_u + dv * dv / n.r_v + rho.dot(&chol.solve(&rho));
    }
    0.5 * cost
}

/// Where the linearization is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvaluationPoint {
    /// Current estimate and measured directions; what a deployed solver sees.
    AtEstimate,
    /// Scenario truth; the point the Fisher information is defined at.
    AtTruth,
}

/// Second-order model `J(x + dx) ~ J - g^T dx + 1/2 dx^T F dx`.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    /// Fisher information / Gauss-Newton normal matrix `F`.
    pub information: DMatrix<f64>,
    /// Negative gradient of the reduced cost.
    pub gradient: DVector<f64>,
    /// Exact Hessian of the reduced cost in the perturbation coordinates,
    /// built from the measured directions. Equals `information` when all
    /// constraint residuals vanish.
    pub hessian: DMatrix<f64>,
    /// The part of `gradient` with `Q` held fixed: `sum e du/R_u + f dv/R_v + G^T Q^-1 rho`.
    pub data_gradient: DVector<f64>,
    /// Per-feature `G_i`, each `3 x (6 + 2n)`.
    pub design: Vec<DMatrix<f64>>,
    pub q_lambda: Vec<Matrix3<f64>>,
    pub constraint_jacobian: Vec<SMatrix<f64, 3, 6>>,
    pub noise: Vec<FeatureNoise>,
    /// `(u~ - u, v~ - v)` per feature.
    pub depth_residuals: Vec<(f64, f64)>,
    /// `u b~ - v A r~ + p` per feature.
    pub constraint_residuals: Vec<Vector3<f64>>,
    pub mode: EvaluationPoint,
}

impl LinearizedSystem {
    pub fn len(&self) -> usize {
        self.q_lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_lambda.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.information.nrows()
    }
}

/// Linearization at `state` with measured directions in `G_i`.
pub fn assemble(meas: &MeasurementSet, noise: &[FeatureNoise], state: &PoseState) -> LinearizedSystem {
    let dirs: Vec<_> = meas.features.iter().map(|m| (m.r, m.b)).collect();
    assemble_with(meas, noise, state, &dirs, EvaluationPoint::AtEstimate)
}

/// Linearization at scenario truth; `G_i` uses true directions, residuals use `meas`.
pub fn assemble_at_truth(scenario: &Scenario, meas: &MeasurementSet) -> LinearizedSystem {
    let dirs: Vec<_> = scenario.truth().iter().map(|t| (t.r, t.b)).collect();
    assemble_with(meas, scenario.noise(), &PoseState::truth(scenario), &dirs, EvaluationPoint::AtTruth)
}

fn assemble_with(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    state: &PoseState,
    directions: &[(Vector3<f64>, Vector3<f64>)],
    mode: EvaluationPoint,
) -> LinearizedSystem {
    let n = meas.len();
    let dim = state_dim(n);
    let a = &state.attitude;
    let mut information = DMatrix::zeros(dim, dim);
    let mut hessian = DMatrix::zeros(dim, dim);
    let mut gradient = DVector::zeros(dim);
    let mut weight_gradient = DVector::zeros(dim);
    let mut design = Vec::with_capacity(n);
    let mut q_lambda = Vec::with_capacity(n);
    let mut jacobians = Vec::with_capacity(n);
    let mut depth_residuals = Vec::with_capacity(n);
    let mut constraint_residuals = Vec::with_capacity(n);

    for (i, (m, nz)) in meas.features.iter().zip(noise).enumerate() {
        let (u, v) = (state.u[i], state.v[i]);
        let (r_dir, b_dir) = directions[i];
        let ar = a.rotate(&r_dir);
        let (ui, vi) = (u_index(i), v_index(i));

        let mut g = DMatrix::zeros(3, dim);
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(skew(&ar) * v));
        g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
        g.fixed_view_mut::<3, 1>(0, ui).copy_from(&(-b_dir));
        g.fixed_view_mut::<3, 1>(0, vi).copy_from(&ar);

        let q = build_q_lambda(a, u, v, nz);
        let q_inv = q.try_inverse().unwrap_or_else(|| Matrix3::from_element(f64::NAN));
        let q_inv = (q_inv + q_inv.transpose()) * 0.5;
        let rho = m.b * u - a.rotate(&m.r) * v + state.position;
        let w = q_inv * rho;

        let du = m.u - u;
        let dv = m.v - v;
        information[(ui, ui)] += 1.0 / nz.r_u;
        information[(vi, vi)] += 1.0 / nz.r_v;
        gradient[ui] += du / nz.r_u;
        gradient[vi] += dv / nz.r_v;

        // G_i touches the pose and this feature's two depths only
        let idx = active_indices(ui, vi);
        let gc = compact_design(&ar, v, &b_dir);
        scatter(&mut information, &idx, &(gc.transpose() * q_inv * gc));
        let gw = gc.transpose() * w;
        for (c, &k) in idx.iter().enumerate() {
            gradient[k] += gw[c];
        }

        // Variation of Q^-1 with the state: -1/2 w^T dQ w per coordinate.
        let rr_rot = a.matrix() * nz.r_r * a.matrix().transpose();
        let mw = rr_rot * w;
        let d_alpha = -mw.cross(&w) * (v * v);
        for k in 0..3 {
            weight_gradient[k] += d_alpha[k];
        }
        weight_gradient[ui] += u * w.dot(&(nz.r_b * w));
        weight_gradient[vi] += v * w.dot(&mw);

        hessian_terms(&mut hessian, HessianInputs {
            u, v, ui, vi,
            a_r: a.rotate(&m.r),
            b: m.b,
            r_b: &nz.r_b,
            m: &rr_rot,
            q_inv: &q_inv,
            w: &w,
        });
        hessian[(ui, ui)] += 1.0 / nz.r_u;
        hessian[(vi, vi)] += 1.0 / nz.r_v;

        design.push(g);
        q_lambda.push(q);
        jacobians.push(constraint_jacobian(a, u, v));
        depth_residuals.push((du, dv));
        constraint_residuals.push(rho);
    }

    LinearizedSystem {
        information: crate::linalg::symmetrize(&information),
        hessian: crate::linalg::symmetrize(&hessian),
        data_gradient: gradient.clone(),
        gradient: gradient + weight_gradient,
        design,
        q_lambda,
        constraint_jacobian: jacobians,
        noise: noise.to_vec(),
        depth_residuals,
        constraint_residuals,
        mode,
    }
}

struct HessianInputs<'a> {
    u: f64,
    v: f64,
    ui: usize,
    vi: usize,
    /// `A r~`
    a_r: Vector3<f64>,
    b: Vector3<f64>,
    r_b: &'a Matrix3<f64>,
    /// `A R_r A^T`
    m: &'a Matrix3<f64>,
    q_inv: &'a Matrix3<f64>,
    w: &'a Vector3<f64>,
}

/// State slots a single feature touches: the pose, then `u_i`, `v_i`.
fn active_indices(ui: usize, vi: usize) -> [usize; 8] {
    [0, 1, 2, 3, 4, 5, ui, vi]
}

/// `G_i` restricted to [`active_indices`]: `[v [A r x], -I, -b, A r]`.
fn compact_design(a_r: &Vector3<f64>, v: f64, b: &Vector3<f64>) -> SMatrix<f64, 3, 8> {
    let mut g = SMatrix::<f64, 3, 8>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(skew(a_r) * v));
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
    g.set_column(6, &(-b));
    g.set_column(7, a_r);
    g
}

fn scatter(h: &mut DMatrix<f64>, idx: &[usize; 8], block: &SMatrix<f64, 8, 8>) {
    for (c, &j) in idx.iter().enumerate() {
        for (r, &i) in idx.iter().enumerate() {
            h[(i, j)] += block[(r, c)];
        }
    }
}

fn sym3(x: &Vector3<f64>, y: &Vector3<f64>) -> Matrix3<f64> {
    (x * y.transpose() + y * x.transpose()) * 0.5
}

/// Adds one feature's `1/2 rho^T Q^-1 rho` Hessian.
///
/// With `rho(d) = rho - G d + rho_2(d)` and `Q(d) = Q + Q_1(d) + Q_2(d)`,
/// `Q_1(d) w = L d`, the second-order part of the cost is
/// `1/2 |G d|_Q^2 + w^T rho_2 - (L d)^T Q^-1 rho_1 - 1/2 w^T Q_2 w + 1/2 |L d|_Q^2`.
fn hessian_terms(h: &mut DMatrix<f64>, f: HessianInputs<'_>) {
    let HessianInputs { u, v, ui, vi, a_r, b, r_b, m, q_inv, w } = f;
    let mw = m * w;

    let g = compact_design(&a_r, v, &b);
    let mut l = SMatrix::<f64, 3, 8>::zeros();
    l.fixed_view_mut::<3, 3>(0, 0).copy_from(&((skew(&mw) - m * skew(w)) * (v * v)));
    l.set_column(6, &(r_b * w * (2.0 * u)));
    l.set_column(7, &(mw * (2.0 * v)));

    let qg = q_inv * g;
    let ql = q_inv * l;
    let block = g.transpose() * qg + l.transpose() * qg + g.transpose() * ql + l.transpose() * ql;
    scatter(h, &active_indices(ui, vi), &block);

    // retraction curvature w^T rho_2 and -1/2 w^T Q_2 w
    let i3 = Matrix3::identity();
    let wx = skew(w);
    let aa = -(sym3(w, &a_r) - i3 * w.dot(&a_r)) * v
        - (sym3(&mw, w) - i3 * w.dot(&mw) + wx.transpose() * m * wx) * (v * v);
    let mut view = h.fixed_view_mut::<3, 3>(0, 0);
    view += aa;
    let av = -w.cross(&a_r) - w.cross(&mw) * (2.0 * v);
    for k in 0..3 {
        h[(k, vi)] += av[k];
        h[(vi, k)] += av[k];
    }
    h[(ui, ui)] -= w.dot(&(r_b * w));
    h[(vi, vi)] -= w.dot(&mw);
}
