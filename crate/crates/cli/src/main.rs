//! `tlspose` command-line front end.
//!
//! Exit codes: 0 success, 2 argument or parse error, 3 numerical failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tlspose::estimator::assemble;
use tlspose::generate::{gen_scenario, GenerationRecipe};
use tlspose::io;
use tlspose::linalg::SpdFactor;
use tlspose::montecarlo::{
    aggregate, compare_covariances, run_trials, sample_measurements, state_component_name, trial_rng,
    write_trials_csv, MonteCarloReport, TrialOptions, CONSISTENCY_BAND,
};
use tlspose::sensitivity::{conditioning_sweep, finite_difference_check, rcond_spd, write_sweep_csv, Sensitivities};
use tlspose::uncertainty::UncertaintyReport;
use tlspose::{solve, Error, Scenario, SolverConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Relative step and tolerance of the sensitivity finite-difference check.
const FD_STEP: f64 = 1e-4;
const FD_TOLERANCE: f64 = 1e-2;

#[derive(Parser)]
#[command(name = "tlspose", version, about = "Total-least-squares pose from lines of sight with virtual depths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file; the bundled reference scenario when omitted.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Master random seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random scenario and write DIR/scenario.toml.
    GenScenario {
        #[arg(long, default_value_t = 6)]
        n_features: usize,
        #[arg(long, default_value_t = 100.0)]
        direction_sigma: f64,
        #[arg(long, default_value_t = 0.006)]
        angle_coeff_deg: f64,
        #[arg(long, default_value_t = 190.0)]
        eps_uv: f64,
        #[arg(long, default_value_t = 1.0)]
        depth_floor: f64,
        /// Use the reference scenario's attitude and position instead of a random pose.
        #[arg(long)]
        fixture_pose: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Solve one measurement set and write DIR/solution.toml.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Measurement file; one seeded draw from the scenario when omitted.
        #[arg(long, value_name = "PATH")]
        measurements: Option<PathBuf>,
        /// Use the exact, noise-free measurements.
        #[arg(long, conflicts_with = "measurements")]
        zero_noise: bool,
    },
    /// Run seeded trials; writes trials.csv, comparison.csv and report.toml.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        n_trials: usize,
        /// Worker threads, 0 = automatic. Results do not depend on it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        zero_noise: bool,
    },
    /// Conditioning sweep over eps_uv plus depth-variance derivatives;
    /// writes sweep.csv and sensitivity.toml.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        /// Comma-separated eps_uv values, meters.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "1,10,100,1000")]
        eps: Vec<f64>,
        /// Evaluate the derivatives on exact measurements.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Fisher information at truth with its inverse; writes fim.toml.
    Fim {
        #[command(flatten)]
        common: Common,
    },
}

fn load_scenario(path: &Option<PathBuf>) -> anyhow::Result<Scenario> {
    Ok(match path {
        Some(p) => io::read_scenario(p).with_context(|| format!("loading scenario {}", p.display()))?,
        None => io::parse_scenario(io::FIXTURE_TOML)?,
    })
}

fn out_file(dir: &Path, name: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.join(name))
}

fn write_text(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    let path = out_file(dir, name)?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<(PathBuf, BufWriter<File>)> {
    let path = out_file(dir, name)?;
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, BufWriter::new(f)))
}

/// A run that finished but whose result is numerically unusable.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn cmd_gen_scenario(recipe: GenerationRecipe, out: &Path) -> anyhow::Result<()> {
    let sc = gen_scenario(&recipe)?;
    let path = write_text(out, "scenario.toml", &io::scenario_to_string(&sc))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_solve(common: &Common, measurements: &Option<PathBuf>, zero_noise: bool) -> anyhow::Result<()> {
    let sc = load_scenario(&common.scenario)?;
    let meas = match measurements {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let m = io::parse_measurements(&text).map_err(|e| match e {
                Error::Parse(m) => Error::Parse(format!("{}: {m}", p.display())),
                other => other,
            })?;
            if m.len() != sc.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} measurements for a {}-feature scenario",
                    m.len(),
                    sc.len()
                ))
                .into());
            }
            m
        }
        None if zero_noise => sc.exact_measurements(),
        None => {
            let m = sample_measurements(&sc, &mut trial_rng(common.seed, 0))?;
            write_text(&common.out, "measurements.toml", &io::measurements_to_string(&m))?;
            m
        }
    };
    let sol = solve(&meas, sc.noise(), &SolverConfig::default())?;
    let rep = UncertaintyReport::at_estimate(&meas, sc.noise(), &sol.state)?;
    let path = write_text(&common.out, "solution.toml", &io::solution_report(&sol, &rep))?;
    println!("wrote {} ({} iterations, cost {:e})", path.display(), sol.iterations, sol.final_cost);
    if !sol.converged {
        return Err(NumericalFailure(format!("solver did not converge in {} iterations", sol.iterations)).into());
    }
    Ok(())
}

fn write_comparison_csv<W: Write>(
    out: W,
    report: &MonteCarloReport,
    analytical: &UncertaintyReport,
) -> anyhow::Result<()> {
    let table = compare_covariances(report, analytical);
    let (lo, hi) = CONSISTENCY_BAND;
    let flag = |x: f64| if (lo..=hi).contains(&x) { "ok" } else { "outside" };
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["quantity", "sample_variance", "analytical_variance", "ratio", "coverage_3sigma", "status"])?;
    for k in 0..table.state.len() {
        w.write_record([
            state_component_name(k),
            report.sample_covariance[(k, k)].to_string(),
            analytical.covariance[(k, k)].to_string(),
            table.state[k].to_string(),
            report.coverage[k].to_string(),
            flag(table.state[k]).to_string(),
        ])?;
    }
    const NAMES: [&str; 6] = ["r_x", "r_y", "r_z", "b_x", "b_y", "b_z"];
    for (label, sample, theory, ratios) in [
        ("res", &report.residual_covariance, &analytical.residual_covariance, &table.residual),
        ("est", &report.estimate_error_covariance, &analytical.estimate_covariance, &table.estimate),
    ] {
        for i in 0..ratios.len() {
            for (c, name) in NAMES.iter().enumerate() {
                w.write_record([
                    format!("{label}_{}_{name}", i + 1),
                    sample[i][(c, c)].to_string(),
                    theory[i][(c, c)].to_string(),
                    ratios[i][c].to_string(),
                    String::new(),
                    flag(ratios[i][c]).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn montecarlo_summary(report: &MonteCarloReport, flagged: &[String]) -> String {
    use toml::Value;
    let mut t = toml::Table::new();
    t.insert("n_trials".into(), Value::Integer(report.n_trials as i64));
    t.insert("seed".into(), Value::Integer(report.seed as i64));
    t.insert("n_converged".into(), Value::Integer(report.n_converged as i64));
    t.insert("n_failed".into(), Value::Integer(report.n_failed as i64));
    t.insert("max_iterations".into(), Value::Integer(report.max_iterations as i64));
    t.insert("low_sample".into(), Value::Boolean(report.low_sample));
    t.insert("coverage_3sigma".into(), Value::Array(report.coverage.iter().map(|x| Value::Float(*x)).collect()));
    t.insert("mean_error".into(), Value::Array(report.mean_error.iter().map(|x| Value::Float(*x)).collect()));
    t.insert("outside_band".into(), Value::Array(flagged.iter().cloned().map(Value::String).collect()));
    let mut doc = toml::Table::new();
    doc.insert("montecarlo".into(), Value::Table(t));
    toml::to_string(&doc).expect("plain values serialize")
}

fn cmd_montecarlo(common: &Common, n_trials: usize, threads: usize, zero_noise: bool) -> anyhow::Result<()> {
    let sc = load_scenario(&common.scenario)?;
    let options = TrialOptions { solver: SolverConfig::default(), threads, zero_noise };
    let records = run_trials(&sc, n_trials, common.seed, &options)?;
    let analytical = UncertaintyReport::at_truth(&sc)?;
    let report = aggregate(&sc, &records, common.seed, &analytical)?;
    let table = compare_covariances(&report, &analytical);

    let (trials_path, mut w) = create(&common.out, "trials.csv")?;
    write_trials_csv(&mut w, &records, sc.len())?;
    w.flush()?;
    let (cmp_path, mut w) = create(&common.out, "comparison.csv")?;
    write_comparison_csv(&mut w, &report, &analytical)?;
    w.flush()?;
    let report_path = write_text(&common.out, "report.toml", &montecarlo_summary(&report, &table.flagged))?;

    for p in [&trials_path, &cmp_path, &report_path] {
        println!("wrote {}", p.display());
    }
    println!("{} of {} trials converged", report.n_converged, report.n_trials);
    if report.low_sample {
        eprintln!("warning: fewer than {} trials; sample statistics are unreliable", tlspose::montecarlo::LOW_SAMPLE_THRESHOLD);
    }
    if !table.flagged.is_empty() {
        eprintln!("ratios outside {:?}: {}", CONSISTENCY_BAND, table.flagged.join(", "));
    }
    Ok(())
}

fn sensitivity_report(sc: &Scenario, zero_noise: bool, seed: u64) -> anyhow::Result<String> {
    use toml::Value;
    let meas = if zero_noise {
        sc.exact_measurements()
    } else {
        sample_measurements(sc, &mut trial_rng(seed, 0))?
    };
    let sol = solve(&meas, sc.noise(), &SolverConfig::default())?;
    let sys = assemble(&meas, sc.noise(), &sol.state);
    let sens = Sensitivities::new(&sys)?;
    let checks = finite_difference_check(&meas, sc.noise(), &sol.state, FD_STEP)?;
    let floats = |xs: &mut dyn Iterator<Item = f64>| Value::Array(xs.map(Value::Float).collect());
    let mut entries = Vec::new();
    for (entry, check) in sens.all()?.into_iter().zip(&checks) {
        let mut t = toml::Table::new();
        t.insert("feature".into(), Value::Integer(entry.feature as i64 + 1));
        t.insert("parameter".into(), Value::String(entry.parameter.name().into()));
        t.insert("d_logdet_F".into(), Value::Float(entry.d_logdet));
        t.insert("d_estimate".into(), floats(&mut entry.d_deltax.iter().copied()));
        t.insert("d_covariance_diagonal".into(), floats(&mut entry.d_cov.diagonal().iter().copied()));
        t.insert("fd_max_rel_err".into(), Value::Float(check.max_rel_err()));
        let ok = check.max_rel_err() <= FD_TOLERANCE;
        t.insert("fd_status".into(), Value::String(if ok { "pass" } else { "fail" }.into()));
        entries.push(Value::Table(t));
    }
    let mut head = toml::Table::new();
    head.insert("converged".into(), Value::Boolean(sol.converged));
    head.insert("fd_relative_step".into(), Value::Float(FD_STEP));
    head.insert("fd_tolerance".into(), Value::Float(FD_TOLERANCE));
    let mut doc = toml::Table::new();
    doc.insert("sensitivity".into(), Value::Table(head));
    doc.insert("entries".into(), Value::Array(entries));
    Ok(toml::to_string(&doc).expect("plain values serialize"))
}

fn cmd_sensitivity(common: &Common, eps: &[f64], zero_noise: bool) -> anyhow::Result<()> {
    let sc = load_scenario(&common.scenario)?;
    let mut eps = eps.to_vec();
    if let Some(bad) = eps.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(Error::InvalidArgument(format!("eps values must be positive, got {bad}")).into());
    }
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let rows = conditioning_sweep(&sc, &eps)?;
    let (sweep_path, mut w) = create(&common.out, "sweep.csv")?;
    write_sweep_csv(&mut w, &rows)?;
    w.flush()?;
    let report_path = write_text(&common.out, "sensitivity.toml", &sensitivity_report(&sc, zero_noise, common.seed)?)?;
    println!("wrote {}", sweep_path.display());
    println!("wrote {}", report_path.display());
    Ok(())
}

fn cmd_fim(common: &Common) -> anyhow::Result<()> {
    let sc = load_scenario(&common.scenario)?;
    let rep = UncertaintyReport::at_truth(&sc)?;
    let rcond = rcond_spd(&rep.information)?;
    let logdet = SpdFactor::new(&rep.information)?.log_det();
    let path = write_text(&common.out, "fim.toml", &io::information_report(&rep, rcond, logdet))?;
    println!("wrote {} (rcond {rcond:e})", path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenScenario {
            n_features,
            direction_sigma,
            angle_coeff_deg,
            eps_uv,
            depth_floor,
            fixture_pose,
            seed,
            out,
        } => {
            let reference = fixture_pose.then(tlspose::fixture::reference_scenario);
            let recipe = GenerationRecipe {
                n_features,
                direction_sigma,
                angle_coeff_deg,
                eps_uv,
                depth_floor,
                seed,
                attitude: reference.as_ref().map(|s| *s.attitude()),
                position: reference.as_ref().map(|s| *s.position()),
            };
            cmd_gen_scenario(recipe, &out)
        }
        Command::Solve { common, measurements, zero_noise } => cmd_solve(&common, &measurements, zero_noise),
        Command::Montecarlo { common, n_trials, threads, zero_noise } => {
            cmd_montecarlo(&common, n_trials, threads, zero_noise)
        }
        Command::Sensitivity { common, eps, zero_noise } => cmd_sensitivity(&common, &eps, zero_noise),
        Command::Fim { common } => cmd_fim(&common),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NumericalFailure>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors by itself
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
