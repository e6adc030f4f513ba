//! Crate-level error type and the exit-code convention of the command-line
//! interface: 1 for configuration or input validation, 2 for numerical
//! failure, 3 for file I/O.

use thiserror::Error;

use crate::calibrate::CalibrationError;
use crate::cohort::CohortError;
use crate::config::ConfigError;
use crate::cox::FitError;
use crate::impute::ImputationError;
use crate::io::IoError;
use crate::model::ModelError;
use crate::pipeline::PipelineError;
use crate::sampling::SamplingError;
use crate::sim::SimError;
use crate::variance::VarianceError;

/// The run was rejected before any computation: bad flags, config, model
/// terms, or cohort data.
pub const EXIT_VALIDATION: i32 = 1;
/// A fit, calibration, imputation, or variance computation failed.
pub const EXIT_NUMERICAL: i32 = 2;
/// A file could not be read or written.
pub const EXIT_IO: i32 = 3;

/// Union of every failure a command can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Imputation(#[from] ImputationError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl Error {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(e) => config_code(e),
            Error::Cohort(_) | Error::Model(_) | Error::Sampling(_) => EXIT_VALIDATION,
            Error::Fit(_) | Error::Calibration(_) | Error::Imputation(_) | Error::Variance(_) => {
                EXIT_NUMERICAL
            }
            Error::Sim(e) => sim_code(e),
            Error::Io(_) => EXIT_IO,
            Error::Pipeline(e) => pipeline_code(e),
        }
    }
}

fn config_code(e: &ConfigError) -> i32 {
    match e {
        ConfigError::Read { .. } => EXIT_IO,
        ConfigError::Parse { .. } | ConfigError::Invalid { .. } => EXIT_VALIDATION,
    }
}

fn sim_code(e: &SimError) -> i32 {
    match e {
        SimError::BadConfig { .. } | SimError::Sampling(_) | SimError::Model(_) => {
            EXIT_VALIDATION
        }
        SimError::TooFewReplicates { .. }
        | SimError::Fit(_)
        | SimError::Calibration(_)
        | SimError::Imputation(_)
        | SimError::Variance(_) => EXIT_NUMERICAL,
    }
}

fn pipeline_code(e: &PipelineError) -> i32 {
    match e {
        PipelineError::Config(c) => config_code(c),
        PipelineError::Cohort(_)
        | PipelineError::Model(_)
        | PipelineError::Sampling(_)
        | PipelineError::MissingSubcohortColumn { .. }
        | PipelineError::BadSubcohortFlag { .. }
        | PipelineError::MissingMeasured { .. } => EXIT_VALIDATION,
        PipelineError::Fit(_)
        | PipelineError::Calibration(_)
        | PipelineError::Imputation(_)
        | PipelineError::Variance(_)
        | PipelineError::ConstraintDrift { .. } => EXIT_NUMERICAL,
        PipelineError::Sim(s) => sim_code(s),
        PipelineError::Io(_) => EXIT_IO,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_convention() {
        let validation: Error = ModelError::Empty.into();
        assert_eq!(validation.exit_code(), EXIT_VALIDATION);

        let numerical: Error = FitError::NoEvents.into();
        assert_eq!(numerical.exit_code(), EXIT_NUMERICAL);

        let io: Error = IoError::File {
            path: "x".into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        }
        .into();
        assert_eq!(io.exit_code(), EXIT_IO);

        // Wrapped errors classify by their cause, not the wrapper.
        let nested: Error = PipelineError::Sim(SimError::BadConfig {
            detail: "x".into(),
        })
        .into();
        assert_eq!(nested.exit_code(), EXIT_VALIDATION);
        let nested_fit: Error = PipelineError::Fit(FitError::NoEvents).into();
        assert_eq!(nested_fit.exit_code(), EXIT_NUMERICAL);
    }
}
