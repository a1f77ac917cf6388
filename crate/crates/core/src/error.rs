use nalgebra::Vector3;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the estimator, the uncertainty stack and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a proper rotation (orthonormality error {orthonormality:e}, det {det})")]
    InvalidRotation { orthonormality: f64, det: f64 },

    /// The rotation angle is too close to pi for the axis sign to be resolved.
    /// `candidate` is the log vector chosen by the largest-diagonal tie-break.
    #[error("rotation angle within {tolerance:e} of pi; axis sign is ambiguous")]
    DegenerateAxis {
        candidate: Vector3<f64>,
        tolerance: f64,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("ill-conditioned system (reciprocal condition {rcond:e})")]
    IllConditioned { rcond: f64 },

    #[error("depth estimate stayed non-positive after {halvings} step halvings")]
    DepthPositivity { halvings: usize },

    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateAxis { .. }
                | Error::DegenerateGeometry(_)
                | Error::DegenerateConfiguration(_)
                | Error::IllConditioned { .. }
                | Error::DepthPositivity { .. }
                | Error::InvalidNoiseModel(_)
        )
    }
}
