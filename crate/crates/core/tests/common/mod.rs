//! Independent reference computations shared by the integration tests.
//!
//! Nothing here calls into the estimator's cost, gradient or information
//! code: the reduced cost is re-derived from the measurement model and all
//! derivatives are taken by finite differences of it.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use tlspose::montecarlo::{sample_measurements, trial_rng};
use tlspose::{FeatureNoise, MeasurementSet, PoseState, Scenario};

/// `1/2 sum (u~-u)^2/R_u + (v~-v)^2/R_v + rho^T Q^-1 rho` with
/// `rho = u b~ - v A r~ + p` and `Q = v^2 A R_r A^T + u^2 R_b`.
pub fn cost(meas: &MeasurementSet, noise: &[FeatureNoise], a: &Matrix3<f64>, p: &Vector3<f64>, u: &[f64], v: &[f64]) -> f64 {
    let mut j = 0.0;
    for (i, (m, nz)) in meas.features.iter().zip(noise).enumerate() {
        let rho = m.b * u[i] - a * m.r * v[i] + p;
        let q = a * nz.r_r * a.transpose() * (v[i] * v[i]) + nz.r_b * (u[i] * u[i]);
        let w = q.try_inverse().expect("weight invertible");
        j += (m.u - u[i]).powi(2) / nz.r_u + (m.v - v[i]).powi(2) / nz.r_v + rho.dot(&(w * rho));
    }
    0.5 * j
}

/// Cost at `base` moved by the packed `delta`; the attitude moves as
/// `A <- exp(-[da x]) A`.
pub fn cost_at(meas: &MeasurementSet, noise: &[FeatureNoise], base: &PoseState, delta: &DVector<f64>) -> f64 {
    let n = base.u.len();
    let da = Vector3::new(delta[0], delta[1], delta[2]);
    let a = Rotation3::new(-da).matrix() * base.attitude.matrix();
    let p = base.position + Vector3::new(delta[3], delta[4], delta[5]);
    let u: Vec<f64> = (0..n).map(|i| base.u[i] + delta[6 + 2 * i]).collect();
    let v: Vec<f64> = (0..n).map(|i| base.v[i] + delta[7 + 2 * i]).collect();
    cost(meas, noise, &a, &p, &u, &v)
}

/// Central-difference gradient with per-component steps `h[k]`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, h: &DVector<f64>) -> DVector<f64> {
    let dim = h.len();
    DVector::from_fn(dim, |k, _| {
        let mut e = DVector::zeros(dim);
        e[k] = h[k];
        (f(&e) - f(&-&e)) / (2.0 * h[k])
    })
}

/// Central second differences, `H_kl ~ [f(++) - f(+-) - f(-+) + f(--)] / 4 h_k h_l`.
pub fn fd_hessian(f: impl Fn(&DVector<f64>) -> f64, h: &DVector<f64>) -> DMatrix<f64> {
    let dim = h.len();
    let f0 = f(&DVector::zeros(dim));
    let mut out = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        for l in k..dim {
            let at = |sk: f64, sl: f64| {
                let mut e = DVector::zeros(dim);
                e[k] += sk * h[k];
                e[l] += sl * h[l];
                f(&e)
            };
            let val = if k == l {
                (at(1.0, 1.0) - 2.0 * f0 + at(-1.0, -1.0)) / (4.0 * h[k] * h[k])
            } else {
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h[k] * h[l])
            };
            out[(k, l)] = val;
            out[(l, k)] = val;
        }
    }
    out
}

/// Plain Nelder-Mead with standard coefficients; returns the best vertex
/// and its value. Stops when the spread of values falls below `ftol`
/// (absolute) or after `max_evals` evaluations.
pub fn nelder_mead(f: &dyn Fn(&DVector<f64>) -> f64, x0: &DVector<f64>, step: f64, ftol: f64, max_evals: usize) -> (DVector<f64>, f64) {
    let dim = x0.len();
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.clone(), f(x0)));
    for k in 0..dim {
        let mut x = x0.clone();
        x[k] += step;
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let mut evals = dim + 1;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[dim].1 - simplex[0].1 <= ftol {
            break;
        }
        let centroid = simplex[..dim].iter().fold(DVector::zeros(dim), |acc, (x, _)| acc + x) / dim as f64;
        let worst = simplex[dim].clone();
        let reflect = &centroid + (&centroid - &worst.0);
        let fr = f(&reflect);
        evals += 1;
        if fr < simplex[0].1 {
            let expand = &centroid + (&reflect - &centroid) * 2.0;
            let fe = f(&expand);
            evals += 1;
            simplex[dim] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
        } else {
            let (toward, ft) = if fr < worst.1 { (reflect, fr) } else { (worst.0.clone(), worst.1) };
            let contract = &centroid + (&toward - &centroid) * 0.5;
            let fc = f(&contract);
            evals += 1;
            if fc < ft {
                simplex[dim] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x = &best + (&vertex.0 - &best) * 0.5;
                    let fx = f(&x);
                    *vertex = (x, fx);
                }
                evals += dim;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// One seeded noisy draw.
pub fn noisy(sc: &Scenario, seed: u64) -> MeasurementSet {
    sample_measurements(sc, &mut trial_rng(seed, 0)).unwrap()
}

/// `Q = v^2 A R_r A^T + u^2 R_b` written out directly.
pub fn weight(a: &Matrix3<f64>, u: f64, v: f64, nz: &FeatureNoise) -> Matrix3<f64> {
    a * nz.r_r * a.transpose() * (v * v) + nz.r_b * (u * u)
}

/// Standard deviations from the inverse of a symmetric positive definite matrix.
/// The matrix is Jacobi-equilibrated before the Cholesky inverse.
pub fn sigmas_of(information: &DMatrix<f64>) -> DVector<f64> {
    let d = information.diagonal().map(|x| 1.0 / x.sqrt());
    let scaled = DMatrix::from_fn(d.len(), d.len(), |i, j| information[(i, j)] * d[i] * d[j]);
    let inv = scaled.cholesky().expect("information is positive definite").inverse();
    DVector::from_fn(d.len(), |k, _| inv[(k, k)].sqrt() * d[k])
}

/// Inverse of a symmetric positive definite matrix through a Jacobi-equilibrated Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.diagonal().map(|x| 1.0 / x.sqrt());
    let scaled = DMatrix::from_fn(d.len(), d.len(), |i, j| m[(i, j)] * d[i] * d[j]);
    let inv = scaled.cholesky().expect("positive definite").inverse();
    DMatrix::from_fn(d.len(), d.len(), |i, j| inv[(i, j)] * d[i] * d[j])
}

/// Worst relative discrepancies of every depth-variance derivative against
/// central differences at one linearization point.
#[derive(Debug, Clone, Copy, Default)]
pub struct SensitivityErrors {
    pub estimate: f64,
    pub covariance: f64,
    pub residual_covariance: f64,
    pub estimate_covariance: f64,
    pub logdet: f64,
    /// Largest `d log det F / dR` seen; must stay negative.
    pub max_d_logdet: f64,
}

impl SensitivityErrors {
    pub fn worst(&self) -> f64 {
        self.estimate.max(self.covariance).max(self.residual_covariance).max(self.estimate_covariance).max(self.logdet)
    }
}

fn rel(fd: &DMatrix<f64>, an: &DMatrix<f64>) -> f64 {
    (fd - an).amax() / an.amax().max(f64::MIN_POSITIVE)
}

/// Central differences in each `R_u_i`, `R_v_i` with relative step `h`.
///
/// Moving `R` changes only the prior entry `1/R` of `F`, which is many
/// orders below the rest of that diagonal entry; assembling `F` twice and
/// subtracting would lose it to roundoff. The perturbed inverses are
/// therefore formed exactly from the unperturbed one by Sherman-Morrison
/// and `log det` by the determinant lemma. The residual and estimate
/// covariances are affine in `F^-1`; their central difference is pushed
/// through `G` with the rank-one difference of inverses kept factored,
/// since `G` nearly annihilates the scale direction of `F^-1` and an
/// explicit `G dF^-1 G^T` loses percents to roundoff. The estimate uses the
/// two assembled systems directly.
pub fn sensitivity_errors(meas: &MeasurementSet, noise: &[FeatureNoise], state: &PoseState, h: f64) -> SensitivityErrors {
    use tlspose::estimator::assemble;
    use tlspose::sensitivity::{DepthVariance, Sensitivities};
    use tlspose::uncertainty::observation_gain_at;

    let sys = assemble(meas, noise, state);
    let s = Sensitivities::new(&sys).expect("information is positive definite");
    let p = spd_inverse(&sys.information);
    let mut out = SensitivityErrors { max_d_logdet: f64::NEG_INFINITY, ..Default::default() };
    for i in 0..noise.len() {
        for which in [DepthVariance::U, DepthVariance::V] {
            let k = which.index(i);
            let r = match which {
                DepthVariance::U => noise[i].r_u,
                DepthVariance::V => noise[i].r_v,
            };
            let at = |factor: f64| {
                let mut nz = noise.to_vec();
                match which {
                    DepthVariance::U => nz[i].r_u *= factor,
                    DepthVariance::V => nz[i].r_v *= factor,
                }
                assemble(meas, &nz, state)
            };
            let (sp, sm) = (at(1.0 + h), at(1.0 - h));
            // the assemblies differ in F_kk only, by roundoff of the prior change
            let raw = &sp.information - &sm.information;
            assert!(raw.iter().enumerate().all(|(idx, x)| idx == k * (sys.dim() + 1) || *x == 0.0));
            let dr = 2.0 * h * r;
            let shift = |factor: f64| 1.0 / (r * factor) - 1.0 / r;
            let (dp_plus, dp_minus) = (shift(1.0 + h), shift(1.0 - h));
            let pkk = p[(k, k)];

            let fd_logdet = ((dp_plus * pkk).ln_1p() - (dp_minus * pkk).ln_1p()) / dr;
            let an_logdet = s.d_logdet(i, which).unwrap();
            out.logdet = out.logdet.max(((fd_logdet - an_logdet) / an_logdet).abs());
            out.max_d_logdet = out.max_d_logdet.max(an_logdet);

            // (F + d e e^T)^-1 = P - d P e e^T P / (1 + d P_kk)
            let weight = dp_plus / (1.0 + dp_plus * pkk) - dp_minus / (1.0 + dp_minus * pkk);
            let dp = -(p.column(k) * p.row(k)) * weight;
            out.covariance = out.covariance.max(rel(&(&dp / dr), &s.d_covariance(i, which).unwrap()));

            let fd_step = (spd_inverse(&sp.information) * &sp.gradient - spd_inverse(&sm.information) * &sm.gradient) / dr;
            let an_step = s.d_estimate(i, which, s.depth_residual(i, which)).unwrap();
            out.estimate = out.estimate.max((fd_step - &an_step).amax() / an_step.amax());

            for j in 0..noise.len() {
                // Q does not move with R, so the central difference of
                // C (Q -/+ G F^-1 G^T) C^T is -/+ C G (F+^-1 - F-^-1) G^T C^T,
                // with the rank-one difference kept in factored form
                let c = observation_gain_at(&sys, j).unwrap();
                let gpe = &sys.design[j] * p.column(k);
                let w = c * Vector3::new(gpe[0], gpe[1], gpe[2]);
                let fd_res = w * w.transpose() * (weight / dr);
                let an_res = s.d_residual_covariance(i, which, j).unwrap();
                out.residual_covariance = out.residual_covariance.max((fd_res - an_res).amax() / an_res.amax());
                let an_est = s.d_estimate_covariance(i, which, j).unwrap();
                out.estimate_covariance = out.estimate_covariance.max((-fd_res - an_est).amax() / an_est.amax());
            }
        }
    }
    out
}

/// Scenarios of varying size from the default recipe.
pub fn random_scenarios(count: u64, base_seed: u64) -> Vec<Scenario> {
    use tlspose::generate::{gen_scenario, GenerationRecipe};
    (0..count)
        .map(|s| gen_scenario(&GenerationRecipe { n_features: 4 + (s % 9) as usize, seed: base_seed + s, ..Default::default() }).unwrap())
        .collect()
}

/// The fixture plus nine generated scenarios of 3 to 10 features.
pub fn derivative_scenarios() -> Vec<Scenario> {
    use tlspose::fixture::reference_scenario;
    use tlspose::generate::{gen_scenario, GenerationRecipe};
    let mut out = vec![reference_scenario()];
    out.extend((0..9).map(|seed| {
        gen_scenario(&GenerationRecipe { n_features: 3 + seed as usize % 8, seed, ..Default::default() }).unwrap()
    }));
    out
}

/// Largest whitened discrepancy, `|S (a - b)| / |S b|` with `S = diag(sigma)`.
pub fn whitened_rel(a: &DVector<f64>, b: &DVector<f64>, sigma: &DVector<f64>) -> f64 {
    (a - b).component_mul(sigma).norm() / b.component_mul(sigma).norm()
}

/// Analytical gradient against central differences of [`cost`] at ten
/// noisy, perturbed states per scenario; returns the number of states and
/// the worst whitened relative error.
pub fn gradient_check() -> (usize, f64) {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_distr::StandardNormal;
    use tlspose::estimator::{assemble, assemble_at_truth};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (k, sc) in derivative_scenarios().iter().enumerate() {
        let sigma = sigmas_of(&assemble_at_truth(sc, &sc.exact_measurements()).information);
        for j in 0..10 {
            let meas = noisy(sc, 100 * k as u64 + j);
            let offset = DVector::from_fn(sc.state_dim(), |i, _| sigma[i] * rng.sample::<f64, _>(StandardNormal));
            let state = PoseState::truth(sc).perturbed(&offset);
            let grad = -assemble(&meas, sc.noise(), &state).gradient;
            let fd = fd_gradient(|d| cost_at(&meas, sc.noise(), &state, d), &(&sigma * 1e-4));
            worst = worst.max(whitened_rel(&grad, &fd, &sigma));
            count += 1;
        }
    }
    (count, worst)
}

/// `F` against the central-difference Hessian of [`cost`] at truth with
/// exact measurements, compared after Jacobi scaling by `diag(F)`; returns
/// the worst entry over all scenarios.
pub fn hessian_check() -> f64 {
    use tlspose::estimator::assemble_at_truth;
    let mut worst: f64 = 0.0;
    for sc in derivative_scenarios() {
        let meas = sc.exact_measurements();
        let truth = PoseState::truth(&sc);
        let f = assemble_at_truth(&sc, &meas).information;
        // the diagonal of F gives the natural step per component
        let h = f.diagonal().map(|x| 1e-3 / x.sqrt());
        let fd = fd_hessian(|d| cost_at(&meas, sc.noise(), &truth, d), &h);
        let d = f.diagonal().map(|x| 1.0 / x.sqrt());
        for i in 0..f.nrows() {
            for j in 0..f.ncols() {
                worst = worst.max(((fd[(i, j)] - f[(i, j)]) * d[i] * d[j]).abs());
            }
        }
    }
    worst
}

/// Nelder-Mead from one start, restarted from its own optimum with a
/// shrinking simplex until a full round no longer improves.
pub fn polished_nelder_mead(f: &dyn Fn(&DVector<f64>) -> f64, x0: &DVector<f64>) -> (DVector<f64>, f64) {
    let (mut x, mut fx) = nelder_mead(f, x0, 1.0, 1e-14, 100_000);
    loop {
        let before = fx;
        for step in [0.3, 0.03, 3e-3, 3e-4] {
            let (y, fy) = nelder_mead(f, &x, step, 1e-16, 100_000);
            if fy < fx {
                x = y;
                fx = fy;
            }
        }
        if before - fx <= 1e-15 * (1.0 + fx) {
            return (x, fx);
        }
    }
}

/// Derivative-free minimum: 20 starts in whitened coordinates (one at the
/// origin, the rest drawn around it), best kept.
pub fn brute_force(f: &dyn Fn(&DVector<f64>) -> f64, dim: usize, seed: u64) -> (DVector<f64>, f64) {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(DVector<f64>, f64)> = None;
    for k in 0..20 {
        let x0 = if k == 0 { DVector::zeros(dim) } else { DVector::from_fn(dim, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal)) };
        let run = polished_nelder_mead(f, &x0);
        if best.as_ref().map_or(true, |b| run.1 < b.1) {
            best = Some(run);
        }
    }
    best.unwrap()
}

/// Outcome of one solver-versus-brute-force comparison.
#[derive(Debug, Clone, Copy)]
pub struct BruteForceOutcome {
    pub converged: bool,
    pub iterations: usize,
    pub solver_cost: f64,
    pub brute_force_cost: f64,
    /// Largest per-parameter difference (rad, m).
    pub max_difference: f64,
}

/// Three-feature instance with depth noise a tenth of the default, so that
/// the optimum is interior.
pub fn three_feature_instance(seed: u64) -> Scenario {
    use tlspose::generate::{gen_scenario, GenerationRecipe};
    gen_scenario(&GenerationRecipe { n_features: 3, eps_uv: 19.0, seed: 1000 + seed, ..Default::default() }).unwrap()
}

pub fn brute_force_comparison(seed: u64) -> BruteForceOutcome {
    use tlspose::estimator::assemble_at_truth;
    use tlspose::{solve, SolverConfig};
    let sc = three_feature_instance(seed);
    let meas = noisy(&sc, seed);
    let sigma = sigmas_of(&assemble_at_truth(&sc, &sc.exact_measurements()).information);
    let truth = PoseState::truth(&sc);
    let whitened = |z: &DVector<f64>| cost_at(&meas, sc.noise(), &truth, &z.component_mul(&sigma));
    let (z, brute_force_cost) = brute_force(&whitened, sc.state_dim(), seed);
    let sol = solve(&meas, sc.noise(), &SolverConfig::default()).unwrap();
    let solver_cost = cost_at(&meas, sc.noise(), &sol.state, &DVector::zeros(sc.state_dim()));
    let diff = sol.state.error_from(&truth.perturbed(&z.component_mul(&sigma)));
    BruteForceOutcome { converged: sol.converged, iterations: sol.iterations, solver_cost, brute_force_cost, max_difference: diff.amax() }
}
