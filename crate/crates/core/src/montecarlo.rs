//! Seeded noise sampling, batch trials and the empirical-versus-analytical
//! covariance comparison.
//!
//! Trial `t` draws from its own ChaCha8 stream `(master_seed, t)`, so a trial's
//! record depends only on its index. Trials run in parallel; aggregation walks
//! the records in index order, so every output is independent of the thread
//! count.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{solve, PoseState, SolverConfig};
use crate::linalg::{psd_factor3, symmetrize};
use crate::model::{Measurement, MeasurementSet, Scenario};
use crate::so3::Rotation;
use crate::uncertainty::UncertaintyReport;

/// Below this many trials the statistics are flagged as low-sample.
pub const LOW_SAMPLE_THRESHOLD: usize = 2000;
/// Variance ratios outside this band are flagged.
pub const CONSISTENCY_BAND: (f64, f64) = (0.85, 1.15);

/// Zero-mean Gaussian 3-vectors with a given PSD covariance.
#[derive(Debug, Clone, Copy)]
pub struct GaussianSampler3 {
    factor: Matrix3<f64>,
}

impl GaussianSampler3 {
    pub fn new(covariance: &Matrix3<f64>) -> Result<Self> {
        Ok(GaussianSampler3 { factor: psd_factor3(covariance)? })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        self.factor * z
    }
}

/// Pre-factored noise model of a scenario.
#[derive(Debug, Clone)]
pub struct MeasurementSampler {
    truth: Vec<Measurement>,
    directions: Vec<(GaussianSampler3, GaussianSampler3)>,
    depth_sigmas: Vec<(f64, f64)>,
}

impl MeasurementSampler {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let mut directions = Vec::with_capacity(scenario.len());
        for n in scenario.noise() {
            directions.push((GaussianSampler3::new(&n.r_r)?, GaussianSampler3::new(&n.r_b)?));
        }
        Ok(MeasurementSampler {
            truth: scenario.exact_measurements().features,
            directions,
            depth_sigmas: scenario.noise().iter().map(|n| (n.r_u.sqrt(), n.r_v.sqrt())).collect(),
        })
    }

    /// One additive-noise draw. Directions are not renormalized.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MeasurementSet {
        let features = self
            .truth
            .iter()
            .zip(&self.directions)
            .zip(&self.depth_sigmas)
            .map(|((t, (dr, db)), (su, sv))| {
                let r = t.r + dr.sample(rng);
                let b = t.b + db.sample(rng);
                let du: f64 = StandardNormal.sample(rng);
                let dv: f64 = StandardNormal.sample(rng);
                Measurement { r, b, u: t.u + su * du, v: t.v + sv * dv }
            })
            .collect();
        MeasurementSet { features }
    }
}

/// One noisy measurement set drawn from `scenario`'s noise model.
pub fn sample_measurements<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<MeasurementSet> {
    Ok(MeasurementSampler::new(scenario)?.sample(rng))
}

/// Random stream of trial `trial` under `master_seed`.
pub fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

/// Errors of one trial. A trial whose solve failed has `converged = false`
/// and NaN errors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Packed `[da, dp, du_1, dv_1, ...]` of the estimate relative to truth.
    pub error: DVector<f64>,
    /// `d~_i - d_hat_i` per feature.
    pub residual: Vec<Vector6<f64>>,
    /// `d_hat_i - d_i` per feature.
    pub estimate_error: Vec<Vector6<f64>>,
    /// Difference of roll, pitch and yaw of estimate and truth, degrees.
    pub rpy_error_deg: Vector3<f64>,
}

impl TrialRecord {
    fn failed(trial: usize, n: usize) -> Self {
        TrialRecord {
            trial,
            converged: false,
            iterations: 0,
            error: DVector::from_element(6 + 2 * n, f64::NAN),
            residual: vec![Vector6::from_element(f64::NAN); n],
            estimate_error: vec![Vector6::from_element(f64::NAN); n],
            rpy_error_deg: Vector3::from_element(f64::NAN),
        }
    }
}

fn wrap_degrees(x: f64) -> f64 {
    let y = (x + 180.0).rem_euclid(360.0) - 180.0;
    if y == -180.0 {
        180.0
    } else {
        y
    }
}

fn stack(r: &Vector3<f64>, b: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(r.x, r.y, r.z, b.x, b.y, b.z)
}

/// Options of a batch run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrialOptions {
    pub solver: SolverConfig,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    /// Feed exact measurements to every trial.
    pub zero_noise: bool,
}

fn run_trial(
    scenario: &Scenario,
    truth: &PoseState,
    sampler: &MeasurementSampler,
    master_seed: u64,
    trial: usize,
    options: &TrialOptions,
) -> TrialRecord {
    let n = scenario.len();
    let meas = if options.zero_noise {
        scenario.exact_measurements()
    } else {
        sampler.sample(&mut trial_rng(master_seed, trial as u64))
    };
    let Ok(sol) = solve(&meas, scenario.noise(), &options.solver) else {
        return TrialRecord::failed(trial, n);
    };
    let residual = meas
        .features
        .iter()
        .zip(&sol.directions)
        .map(|(m, d)| stack(&m.r, &m.b) - d)
        .collect();
    let estimate_error = scenario
        .truth()
        .iter()
        .zip(&sol.directions)
        .map(|(t, d)| d - stack(&t.r, &t.b))
        .collect();
    let rpy = rpy_difference_deg(&sol.state.attitude, scenario.attitude());
    TrialRecord {
        trial,
        converged: sol.converged,
        iterations: sol.iterations,
        error: sol.state.error_from(truth),
        residual,
        estimate_error,
        rpy_error_deg: rpy,
    }
}

/// Runs `n_trials` independent sample-solve-record trials.
pub fn run_trials(
    scenario: &Scenario,
    n_trials: usize,
    master_seed: u64,
    options: &TrialOptions,
) -> Result<Vec<TrialRecord>> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    options.solver.validate()?;
    let sampler = MeasurementSampler::new(scenario)?;
    let truth = PoseState::truth(scenario);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        (0..n_trials)
            .into_par_iter()
            .map(|t| run_trial(scenario, &truth, &sampler, master_seed, t, options))
            .collect()
    }))
}

/// Fraction of samples with `|e_k| <= 3 sigma_k`, per component.
pub fn coverage<'a>(errors: impl IntoIterator<Item = &'a DVector<f64>>, sigmas: &DVector<f64>) -> Result<DVector<f64>> {
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("sigmas must be positive".into()));
    }
    let mut inside = DVector::<f64>::zeros(sigmas.len());
    let mut count = 0usize;
    for e in errors {
        count += 1;
        for k in 0..sigmas.len() {
            if e[k].abs() <= 3.0 * sigmas[k] {
                inside[k] += 1.0;
            }
        }
    }
    Ok(inside / count.max(1) as f64)
}

fn second_moment6<'a>(xs: impl Iterator<Item = &'a Vector6<f64>>) -> Matrix6<f64> {
    let mut acc = Matrix6::zeros();
    let mut count = 0usize;
    for x in xs {
        acc += x * x.transpose();
        count += 1;
    }
    let m = acc / count.max(1) as f64;
    (m + m.transpose()) * 0.5
}

/// Aggregate statistics of a batch; only converged trials enter the moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub n_trials: usize,
    pub seed: u64,
    pub n_converged: usize,
    /// Trials that failed or hit the iteration limit.
    pub n_failed: usize,
    /// Fewer than [`LOW_SAMPLE_THRESHOLD`] trials.
    pub low_sample: bool,
    pub mean_error: DVector<f64>,
    /// `E{dx dx^T}` over converged trials.
    pub sample_covariance: DMatrix<f64>,
    /// 3-sigma coverage per state component against the at-truth `F^-1`.
    pub coverage: DVector<f64>,
    pub residual_covariance: Vec<Matrix6<f64>>,
    pub estimate_error_covariance: Vec<Matrix6<f64>>,
    pub max_iterations: usize,
}

/// Aggregates `records` in index order.
pub fn aggregate(
    scenario: &Scenario,
    records: &[TrialRecord],
    seed: u64,
    analytical: &UncertaintyReport,
) -> Result<MonteCarloReport> {
    let n = scenario.len();
    let dim = scenario.state_dim();
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.converged).collect();
    let count = ok.len().max(1) as f64;
    let mut mean = DVector::zeros(dim);
    let mut second = DMatrix::zeros(dim, dim);
    for r in &ok {
        mean += &r.error;
        second.ger(1.0, &r.error, &r.error, 1.0);
    }
    let residual_covariance = (0..n).map(|i| second_moment6(ok.iter().map(|r| &r.residual[i]))).collect();
    let estimate_error_covariance = (0..n).map(|i| second_moment6(ok.iter().map(|r| &r.estimate_error[i]))).collect();
    Ok(MonteCarloReport {
        n_trials: records.len(),
        seed,
        n_converged: ok.len(),
        n_failed: records.len() - ok.len(),
        low_sample: records.len() < LOW_SAMPLE_THRESHOLD,
        mean_error: mean / count,
        sample_covariance: symmetrize(&(second / count)),
        coverage: coverage(ok.iter().map(|r| &r.error), &analytical.sigmas())?,
        residual_covariance,
        estimate_error_covariance,
        max_iterations: records.iter().map(|r| r.iterations).max().unwrap_or(0),
    })
}

/// Sample-to-analytical variance ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyTable {
    pub state: DVector<f64>,
    pub residual: Vec<Vector6<f64>>,
    pub estimate: Vec<Vector6<f64>>,
    /// Human-readable names of ratios outside [`CONSISTENCY_BAND`].
    pub flagged: Vec<String>,
    pub low_sample: bool,
}

fn diag_ratio(sample: &Matrix6<f64>, analytical: &Matrix6<f64>) -> Vector6<f64> {
    Vector6::from_fn(|k, _| sample[(k, k)] / analytical[(k, k)])
}

/// Name of packed state component `k` for `n` features.
pub fn state_component_name(k: usize) -> String {
    const POSE: [&str; 6] = ["dalpha_x", "dalpha_y", "dalpha_z", "dp_x", "dp_y", "dp_z"];
    if k < 6 {
        POSE[k].to_string()
    } else {
        let i = (k - 6) / 2 + 1;
        if (k - 6) % 2 == 0 {
            format!("du_{i}")
        } else {
            format!("dv_{i}")
        }
    }
}

const DIRECTION_NAMES: [&str; 6] = ["r_x", "r_y", "r_z", "b_x", "b_y", "b_z"];

/// Compares sampled moments with the analytical covariances.
pub fn compare_covariances(report: &MonteCarloReport, analytical: &UncertaintyReport) -> ConsistencyTable {
    let dim = analytical.covariance.nrows();
    let state = DVector::from_fn(dim, |k, _| report.sample_covariance[(k, k)] / analytical.covariance[(k, k)]);
    let residual: Vec<_> = report
        .residual_covariance
        .iter()
        .zip(&analytical.residual_covariance)
        .map(|(s, a)| diag_ratio(s, a))
        .collect();
    let estimate: Vec<_> = report
        .estimate_error_covariance
        .iter()
        .zip(&analytical.estimate_covariance)
        .map(|(s, a)| diag_ratio(s, a))
        .collect();
    let (lo, hi) = CONSISTENCY_BAND;
    let outside = |x: f64| !(lo..=hi).contains(&x);
    let mut flagged = Vec::new();
    for (k, &x) in state.iter().enumerate() {
        if outside(x) {
            flagged.push(format!("{} ({x:.3})", state_component_name(k)));
        }
    }
    for (label, table) in [("residual", &residual), ("estimate", &estimate)] {
        for (i, row) in table.iter().enumerate() {
            for (k, &x) in row.iter().enumerate() {
                if outside(x) {
                    flagged.push(format!("{label}_{}_{} ({x:.3})", i + 1, DIRECTION_NAMES[k]));
                }
            }
        }
    }
    ConsistencyTable { state, residual, estimate, flagged, low_sample: report.low_sample }
}

/// Header of the trial dump for `n` features.
pub fn trial_csv_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = ["trial", "converged", "iters"].iter().map(|s| s.to_string()).collect();
    h.extend((0..6 + 2 * n).map(state_component_name));
    for prefix in ["res", "est"] {
        for i in 1..=n {
            h.extend(DIRECTION_NAMES.iter().map(|c| format!("{prefix}_{i}_{c}")));
        }
    }
    h.extend(["droll_deg", "dpitch_deg", "dyaw_deg"].iter().map(|s| s.to_string()));
    h
}

/// Writes one CSV row per trial, in trial order.
pub fn write_trials_csv<W: Write>(out: W, records: &[TrialRecord], n: usize) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(trial_csv_header(n))?;
    for r in records {
        let mut row = vec![r.trial.to_string(), (r.converged as u8).to_string(), r.iterations.to_string()];
        row.extend(r.error.iter().map(|x| x.to_string()));
        for block in [&r.residual, &r.estimate_error] {
            for d in block {
                row.extend(d.iter().map(|x| x.to_string()));
            }
        }
        row.extend(r.rpy_error_deg.iter().map(|x| x.to_string()));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Differenced roll/pitch/yaw in degrees, wrapped to (-180, 180]. Emitted for
/// plotting only; the statistics use the log-map error.
pub fn rpy_difference_deg(estimate: &Rotation, truth: &Rotation) -> Vector3<f64> {
    (estimate.roll_pitch_yaw() - truth.roll_pitch_yaw()).map(|x| wrap_degrees(x.to_degrees()))
}
