//! Derivatives of the estimate, the covariances and `log det F` with respect
//! to the virtual-depth variances `R_u_i`, `R_v_i`, and the conditioning of
//! `F` as the depth variances are scaled.
//!
//! Every quantity here depends on `R_u_i` only through the prior block
//! `e_i^T e_i / R_u_i` of `F` and `e_i du_i / R_u_i` of `g`, where `e_i`
//! selects the `u_i` slot (`f_i` and `v_i` for the `R_v` twins).

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix6};

use crate::error::{Error, Result};
use crate::estimator::{assemble, assemble_at_truth, u_index, v_index, LinearizedSystem, PoseState};
use crate::linalg::{symmetrize, SpdFactor};
use crate::model::{FeatureNoise, MeasurementSet, Scenario};
use crate::uncertainty::observation_gain_at;

/// `eps_uv` the fixture's depth variances correspond to.
pub const REFERENCE_EPS_UV: f64 = 190.0;

/// Which virtual-depth variance is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DepthVariance {
    /// `R_u_i`, body frame.
    U,
    /// `R_v_i`, reference frame.
    V,
}

impl DepthVariance {
    pub fn index(self, feature: usize) -> usize {
        match self {
            DepthVariance::U => u_index(feature),
            DepthVariance::V => v_index(feature),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DepthVariance::U => "R_u",
            DepthVariance::V => "R_v",
        }
    }
}

/// `F^-1`, the step `F^-1 g` and the system they came from.
#[derive(Debug, Clone)]
pub struct Sensitivities<'a> {
    sys: &'a LinearizedSystem,
    cov: DMatrix<f64>,
    step: DVector<f64>,
}

impl<'a> Sensitivities<'a> {
    pub fn new(sys: &'a LinearizedSystem) -> Result<Self> {
        let f = SpdFactor::new(&sys.information)?;
        Ok(Sensitivities { step: f.solve(&sys.gradient), cov: f.inverse(), sys })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// The step `dx = F^-1 g`.
    pub fn step(&self) -> &DVector<f64> {
        &self.step
    }

    fn check(&self, feature: usize) -> Result<()> {
        if feature >= self.sys.len() {
            return Err(Error::InvalidArgument(format!(
                "feature {feature} out of range (n = {})",
                self.sys.len()
            )));
        }
        Ok(())
    }

    fn variance(&self, feature: usize, which: DepthVariance) -> f64 {
        let n = &self.sys.noise[feature];
        match which {
            DepthVariance::U => n.r_u,
            DepthVariance::V => n.r_v,
        }
    }

    /// Measured-minus-estimated depth at the linearization point.
    pub fn depth_residual(&self, feature: usize, which: DepthVariance) -> f64 {
        let (du, dv) = self.sys.depth_residuals[feature];
        match which {
            DepthVariance::U => du,
            DepthVariance::V => dv,
        }
    }

    /// `d(dx)/dR = -F^-1 e^T (du - e dx) / R^2` for a given depth residual `du`.
    ///
    /// Zero when the depth residual equals the estimated depth correction.
    pub fn d_estimate(&self, feature: usize, which: DepthVariance, residual: f64) -> Result<DVector<f64>> {
        self.check(feature)?;
        let k = which.index(feature);
        let r = self.variance(feature, which);
        let scale = -(residual - self.step[k]) / (r * r);
        Ok(self.cov.column(k) * scale)
    }

    /// `d(F^-1)/dR = F^-1 e^T e F^-1 / R^2`; positive semidefinite, rank one.
    pub fn d_covariance(&self, feature: usize, which: DepthVariance) -> Result<DMatrix<f64>> {
        self.check(feature)?;
        let k = which.index(feature);
        let r = self.variance(feature, which);
        let col = self.cov.column(k);
        Ok(&col * col.transpose() / (r * r))
    }

    /// `G_j F^-1 e^T / R`, the 3-vector shared by the residual and estimate
    /// covariance derivatives of feature `j`.
    fn design_column(&self, feature: usize, which: DepthVariance, j: usize) -> Result<nalgebra::Vector3<f64>> {
        self.check(feature)?;
        self.check(j)?;
        let k = which.index(feature);
        let r = self.variance(feature, which);
        let gc = &self.sys.design[j] * self.cov.column(k);
        Ok(nalgebra::Vector3::new(gc[0], gc[1], gc[2]) / r)
    }

    /// Derivative of the residual covariance of feature `j`:
    /// `-C_j G_j F^-1 e^T e F^-1 G_j^T C_j^T / R^2`.
    pub fn d_residual_covariance(&self, feature: usize, which: DepthVariance, j: usize) -> Result<Matrix6<f64>> {
        let c = observation_gain_at(self.sys, j)?;
        let w = c * self.design_column(feature, which, j)?;
        Ok(-(w * w.transpose()))
    }

    /// Derivative of the estimate covariance of feature `j`; the exact
    /// negative of [`Sensitivities::d_residual_covariance`].
    pub fn d_estimate_covariance(&self, feature: usize, which: DepthVariance, j: usize) -> Result<Matrix6<f64>> {
        Ok(-self.d_residual_covariance(feature, which, j)?)
    }

    /// `d log det F / dR = -(F^-1)_kk / R^2`; always negative.
    pub fn d_logdet(&self, feature: usize, which: DepthVariance) -> Result<f64> {
        self.check(feature)?;
        let k = which.index(feature);
        let r = self.variance(feature, which);
        Ok(-self.cov[(k, k)] / (r * r))
    }

    /// Sensitivities for every feature and both depth variances, using the
    /// system's own depth residuals.
    pub fn all(&self) -> Result<Vec<ParameterSensitivity>> {
        let mut out = Vec::with_capacity(2 * self.sys.len());
        for i in 0..self.sys.len() {
            for which in [DepthVariance::U, DepthVariance::V] {
                out.push(ParameterSensitivity {
                    feature: i,
                    parameter: which,
                    d_deltax: self.d_estimate(i, which, self.depth_residual(i, which))?,
                    d_cov: self.d_covariance(i, which)?,
                    d_logdet: self.d_logdet(i, which)?,
                });
            }
        }
        Ok(out)
    }
}

/// Derivatives with respect to one depth variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSensitivity {
    pub feature: usize,
    pub parameter: DepthVariance,
    pub d_deltax: DVector<f64>,
    pub d_cov: DMatrix<f64>,
    pub d_logdet: f64,
}

/// One row of a conditioning sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub eps_uv: f64,
    /// Ratio of the extreme eigenvalues of `F`.
    pub rcond: f64,
    pub logdet: f64,
}

/// Per-parameter sensitivities plus an optional sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub entries: Vec<ParameterSensitivity>,
    pub sweep: Vec<SweepRow>,
}

impl SensitivityReport {
    pub fn new(sys: &LinearizedSystem, sweep: Vec<SweepRow>) -> Result<Self> {
        Ok(SensitivityReport { entries: Sensitivities::new(sys)?.all()?, sweep })
    }
}

/// `lambda_min / lambda_max` of an SPD matrix.
///
/// The smallest eigenvalue of `F` sits far below the roundoff of a direct
/// eigensolve, so it is taken as `1 / lambda_max(F^-1)` with the inverse from
/// the equilibrated factorization.
pub fn rcond_spd(m: &DMatrix<f64>) -> Result<f64> {
    let inv = SpdFactor::new(m)?.inverse();
    let hi = symmetrize(m).symmetric_eigenvalues().max();
    let inv_hi = inv.symmetric_eigenvalues().max();
    Ok(1.0 / (hi * inv_hi))
}

/// `rcond(F)` and `log det F` at truth with every `R_u`, `R_v` scaled by
/// `(eps / 190)^2`, one row per entry of `eps_values` (ascending, positive).
pub fn conditioning_sweep(scenario: &Scenario, eps_values: &[f64]) -> Result<Vec<SweepRow>> {
    if eps_values.is_empty() {
        return Err(Error::InvalidArgument("eps list is empty".into()));
    }
    if let Some(bad) = eps_values.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(Error::InvalidArgument(format!("eps values must be positive, got {bad}")));
    }
    if eps_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("eps values must be strictly ascending".into()));
    }
    eps_values
        .iter()
        .map(|&eps| {
            let s = (eps / REFERENCE_EPS_UV).powi(2);
            let scaled = scenario.map_noise(|_, n| {
                let mut n = *n;
                n.r_u *= s;
                n.r_v *= s;
                n
            })?;
            let f = assemble_at_truth(&scaled, &scaled.exact_measurements()).information;
            Ok(SweepRow { eps_uv: eps, rcond: rcond_spd(&f)?, logdet: SpdFactor::new(&f)?.log_det() })
        })
        .collect()
}

/// Relative agreement of one analytical derivative set with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdCheck {
    pub feature: usize,
    pub parameter: DepthVariance,
    pub logdet_rel_err: f64,
    pub covariance_rel_err: f64,
    pub estimate_rel_err: f64,
}

impl FdCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.logdet_rel_err.max(self.covariance_rel_err).max(self.estimate_rel_err)
    }
}

/// Checks every derivative at `state` against central differences with
/// relative step `h` on the depth variance.
///
/// The perturbed systems differ only in one prior entry of `F`, which is
/// small next to the data part of that diagonal entry; the difference of the
/// assembled matrices is therefore replaced by the exact difference of the
/// priors before it enters `log det (I + F^-1 dF)` and `-F+^-1 dF F-^-1`.
pub fn finite_difference_check(
    meas: &MeasurementSet,
    noise: &[FeatureNoise],
    state: &PoseState,
    h: f64,
) -> Result<Vec<FdCheck>> {
    if !(h > 0.0 && h < 0.5) {
        return Err(Error::InvalidArgument(format!("relative step must be in (0, 0.5), got {h}")));
    }
    let sys = assemble(meas, noise, state);
    let s = Sensitivities::new(&sys)?;
    let dim = sys.dim();
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() / b.amax().max(f64::MIN_POSITIVE);
    let mut out = Vec::with_capacity(2 * sys.len());
    for i in 0..sys.len() {
        for which in [DepthVariance::U, DepthVariance::V] {
            let r = s.variance(i, which);
            let k = which.index(i);
            let perturbed = |factor: f64| {
                let mut nz = noise.to_vec();
                match which {
                    DepthVariance::U => nz[i].r_u *= factor,
                    DepthVariance::V => nz[i].r_v *= factor,
                }
                assemble(meas, &nz, state)
            };
            let (sp, sm) = (perturbed(1.0 + h), perturbed(1.0 - h));
            let fp = SpdFactor::new(&sp.information)?;
            let fm = SpdFactor::new(&sm.information)?;
            let dr = 2.0 * h * r;
            let mut df = DMatrix::zeros(dim, dim);
            df[(k, k)] = 1.0 / (r * (1.0 + h)) - 1.0 / (r * (1.0 - h));
            let pm = fm.inverse();
            let fd_logdet = (DMatrix::identity(dim, dim) + &pm * &df).determinant().ln() / dr;
            let fd_cov = -(fp.inverse() * &df * &pm) / dr;
            let fd_step = (fp.solve(&sp.gradient) - fm.solve(&sm.gradient)) / dr;
            let an_logdet = s.d_logdet(i, which)?;
            let an_step = s.d_estimate(i, which, s.depth_residual(i, which))?;
            out.push(FdCheck {
                feature: i,
                parameter: which,
                logdet_rel_err: ((an_logdet - fd_logdet) / an_logdet).abs(),
                covariance_rel_err: rel(&fd_cov, &s.d_covariance(i, which)?),
                estimate_rel_err: rel(&DMatrix::from_column_slice(dim, 1, fd_step.as_slice()), &DMatrix::from_column_slice(dim, 1, an_step.as_slice())),
            });
        }
    }
    Ok(out)
}

/// Writes `eps_uv,rcond_F,logdet_F` rows.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["eps_uv", "rcond_F", "logdet_F"])?;
    for r in rows {
        w.write_record([r.eps_uv.to_string(), format!("{:e}", r.rcond), r.logdet.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{solve, SolverConfig};
    use crate::fixture::reference_scenario;
    use crate::montecarlo::{sample_measurements, trial_rng};
    use crate::uncertainty::{estimate_covariance, residual_covariance};
    use approx::assert_relative_eq;

    fn noisy_system() -> LinearizedSystem {
        let sc = reference_scenario();
        let meas = sample_measurements(&sc, &mut trial_rng(3, 0)).unwrap();
        let sol = solve(&meas, sc.noise(), &SolverConfig::default()).unwrap();
        assemble(&meas, sc.noise(), &sol.state)
    }

    #[test]
    fn estimate_derivative_vanishes_when_residual_equals_correction() {
        let sys = noisy_system();
        let s = Sensitivities::new(&sys).unwrap();
        for which in [DepthVariance::U, DepthVariance::V] {
            let k = which.index(2);
            let d = s.d_estimate(2, which, s.step()[k]).unwrap();
            assert_eq!(d.amax(), 0.0);
        }
    }

    #[test]
    fn diagonal_information_gives_single_entries() {
        // a diagonal F, built by hand, exercises the closed forms
        let sc = reference_scenario();
        let mut sys = assemble_at_truth(&sc, &sc.exact_measurements());
        let dim = sys.dim();
        let diag = DVector::from_fn(dim, |k, _| 1.0 + k as f64);
        sys.information = DMatrix::from_diagonal(&diag);
        sys.gradient = DVector::zeros(dim);
        let s = Sensitivities::new(&sys).unwrap();
        let k = u_index(1);
        let r = sc.noise()[1].r_u;
        let dc = s.d_covariance(1, DepthVariance::U).unwrap();
        assert_relative_eq!(dc[(k, k)], (1.0 / diag[k]).powi(2) / (r * r), max_relative = 1e-14);
        assert_eq!(dc.iter().filter(|x| **x != 0.0).count(), 1);
        assert_relative_eq!(s.d_logdet(1, DepthVariance::U).unwrap(), -1.0 / diag[k] / (r * r), max_relative = 1e-14);
    }

    #[test]
    fn logdet_derivative_is_negative_on_fixture() {
        let sc = reference_scenario();
        let sys = assemble_at_truth(&sc, &sc.exact_measurements());
        let s = Sensitivities::new(&sys).unwrap();
        for i in 0..sc.len() {
            for which in [DepthVariance::U, DepthVariance::V] {
                assert!(s.d_logdet(i, which).unwrap() < 0.0);
                let dc = s.d_covariance(i, which).unwrap();
                let k = which.index(i);
                assert_relative_eq!(dc[(k, k)], (s.covariance()[(k, k)] / s.variance(i, which)).powi(2), max_relative = 1e-12);
            }
        }
    }

    fn scaled(sc: &Scenario, i: usize, which: DepthVariance, factor: f64) -> Scenario {
        sc.map_noise(|j, n| {
            let mut n: FeatureNoise = *n;
            if j == i {
                match which {
                    DepthVariance::U => n.r_u *= factor,
                    DepthVariance::V => n.r_v *= factor,
                }
            }
            n
        })
        .unwrap()
    }

    #[test]
    fn derivatives_match_central_differences_on_fixture() {
        let sc = reference_scenario();
        let meas = sample_measurements(&sc, &mut trial_rng(3, 0)).unwrap();
        let state = solve(&meas, sc.noise(), &SolverConfig::default()).unwrap().state;
        let sys = assemble(&meas, sc.noise(), &state);
        let s = Sensitivities::new(&sys).unwrap();
        let h = 1e-4;
        for i in [0, 5] {
            for which in [DepthVariance::U, DepthVariance::V] {
                let r = s.variance(i, which);
                let sp = assemble(&meas, scaled(&sc, i, which, 1.0 + h).noise(), &state);
                let sm = assemble(&meas, scaled(&sc, i, which, 1.0 - h).noise(), &state);
                let fp = SpdFactor::new(&sp.information).unwrap();
                let fm = SpdFactor::new(&sm.information).unwrap();
                let dr = 2.0 * h * r;
                // The two assemblies differ only in the prior entry, which is
                // far below the data part of F_kk; their difference is quantized
                // there, so the exact difference of the priors is used in the
                // determinant and inverse identities below.
                let k = which.index(i);
                let dim = sys.dim();
                let raw = &sp.information - &sm.information;
                let mut df = DMatrix::zeros(dim, dim);
                df[(k, k)] = 1.0 / (r * (1.0 + h)) - 1.0 / (r * (1.0 - h));
                assert!((&raw - &df).amax() <= 8.0 * f64::EPSILON * sys.information[(k, k)]);
                let (pp, pm) = (fp.inverse(), fm.inverse());
                let dp = -(&pp * &df * &pm);
                let fd_logdet = (DMatrix::identity(dim, dim) + &pm * &df).determinant().ln() / dr;
                assert_relative_eq!(s.d_logdet(i, which).unwrap(), fd_logdet, max_relative = 5e-3);

                let fd_step = (fp.solve(&sp.gradient) - fm.solve(&sm.gradient)) / dr;
                let an_step = s.d_estimate(i, which, s.depth_residual(i, which)).unwrap();
                assert!((&fd_step - &an_step).amax() <= 1e-2 * an_step.amax(), "feature {i} {which:?}");

                let an_cov = s.d_covariance(i, which).unwrap();
                assert!((&dp / dr - &an_cov).amax() <= 5e-3 * an_cov.amax());

                // both covariances are affine in F^-1; a magnified step in F^-1
                // avoids the cancellation against Q
                let t = 1.0 / h;
                let p_big = &pm + &dp * t;
                for j in 0..sc.len() {
                    let fd_res = (residual_covariance(&sys, j, &p_big).unwrap() - residual_covariance(&sys, j, &pm).unwrap()) / (t * dr);
                    let an_res = s.d_residual_covariance(i, which, j).unwrap();
                    assert!((fd_res - an_res).amax() <= 1e-2 * an_res.amax(), "res {i} {j}");
                    let fd_est = (estimate_covariance(&sys, j, &p_big).unwrap() - estimate_covariance(&sys, j, &pm).unwrap()) / (t * dr);
                    assert!((fd_est + an_res).amax() <= 1e-2 * an_res.amax(), "est {i} {j}");
                }
            }
        }
    }

    #[test]
    fn runtime_check_passes_on_fixture() {
        let sc = reference_scenario();
        let meas = sample_measurements(&sc, &mut trial_rng(4, 0)).unwrap();
        let state = solve(&meas, sc.noise(), &SolverConfig::default()).unwrap().state;
        let checks = finite_difference_check(&meas, sc.noise(), &state, 1e-4).unwrap();
        assert_eq!(checks.len(), 2 * sc.len());
        for c in checks {
            assert!(c.max_rel_err() < 1e-2, "{c:?}");
        }
    }

    #[test]
    fn residual_and_estimate_derivatives_are_negatives() {
        let sc = reference_scenario();
        let sys = assemble_at_truth(&sc, &sc.exact_measurements());
        let s = Sensitivities::new(&sys).unwrap();
        for i in 0..sc.len() {
            for j in 0..sc.len() {
                let a = s.d_residual_covariance(i, DepthVariance::V, j).unwrap();
                let b = s.d_estimate_covariance(i, DepthVariance::V, j).unwrap();
                assert_eq!(a, -b);
            }
        }
    }

    #[test]
    fn sweep_is_monotone_and_matches_baseline() {
        let sc = reference_scenario();
        let rows = conditioning_sweep(&sc, &[1.0, 10.0, 100.0, 1000.0]).unwrap();
        assert!(rows.windows(2).all(|w| w[1].rcond < w[0].rcond));
        assert!(rows.windows(2).all(|w| w[1].logdet < w[0].logdet));
        let base = conditioning_sweep(&sc, &[REFERENCE_EPS_UV]).unwrap()[0];
        let f = assemble_at_truth(&sc, &sc.exact_measurements()).information;
        assert_relative_eq!(base.rcond, rcond_spd(&f).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn sweep_rejects_bad_lists() {
        let sc = reference_scenario();
        assert!(conditioning_sweep(&sc, &[]).is_err());
        assert!(conditioning_sweep(&sc, &[-5.0]).is_err());
        assert!(conditioning_sweep(&sc, &[10.0, 1.0]).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let rows = vec![SweepRow { eps_uv: 1.0, rcond: 1e-12, logdet: 3.5 }];
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "eps_uv,rcond_F,logdet_F\n1,1e-12,3.5\n");
    }
}
