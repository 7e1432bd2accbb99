//! Error type with the stable exit-code contract:
//! 0 success, 2 validation, 3 IO, 4 internal invariant breach.

use smoothcache::calibration::CalibrationError;
use smoothcache::diffusion::DiffusionError;
use smoothcache::model::ModelError;
use smoothcache::numerics::NumericsError;
use smoothcache::runtime::RuntimeError;
use smoothcache::scheduler::ScheduleError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("io: {0}")]
    Io(String),
    #[error("internal invariant breach: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Io(io) => CliError::Io(io.to_string()),
            CalibrationError::Numerics(NumericsError::Io(io)) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(NumericsError::Io(io)) => CliError::Io(io.to_string()),
            ModelError::Config(msg) => CliError::Validation(msg),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Config(msg) => CliError::Validation(msg),
            DiffusionError::Model(m) => m.into(),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Io(io) => CliError::Io(io.to_string()),
            RuntimeError::StepMismatch { .. } | RuntimeError::MissingKind(_) => {
                CliError::Validation(e.to_string())
            }
            RuntimeError::InvalidSchedule(_) => CliError::Validation(e.to_string()),
            RuntimeError::Nonconforming { .. } => CliError::Internal(e.to_string()),
            RuntimeError::Diffusion(d) => d.into(),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}
