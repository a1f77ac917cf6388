//! Shared inputs for the benchmarks.

use tlspose::fixture::reference_scenario;
use tlspose::montecarlo::{sample_measurements, trial_rng};
use tlspose::{MeasurementSet, Scenario};

/// The bundled fixture and one seeded noisy draw of it.
pub fn noisy_fixture(seed: u64) -> (Scenario, MeasurementSet) {
    let sc = reference_scenario();
    let meas = sample_measurements(&sc, &mut trial_rng(seed, 0)).expect("fixture covariances are valid");
    (sc, meas)
}
