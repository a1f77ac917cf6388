//! Total-least-squares monocular pose estimation from paired lines of sight
//! with virtual depths, with its first-order uncertainty analysis.
//!
//! The measurement model is `u_i b_i = v_i A r_i - p`: a feature seen along
//! `r_i` at depth `v_i` in the reference frame appears along `b_i` at depth
//! `u_i` in the body frame. Both lines of sight and both depths are noisy.

pub mod error;
pub mod estimator;
pub mod fixture;
pub mod generate;
pub mod io;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod sensitivity;
pub mod so3;
pub mod uncertainty;

pub use error::{Error, Result};
pub use estimator::{solve, LinearizedSystem, PoseSolution, PoseState, SolverConfig};
pub use model::{FeatureNoise, FeatureTruth, Measurement, MeasurementSet, Scenario};
pub use so3::{exp_so3, log_so3, skew, Rotation};
