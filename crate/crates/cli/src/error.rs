use std::fmt;
use std::io;

use flip_core::calibrate::CalibError;
use flip_core::env::EnvError;
use flip_core::lab::LabError;
use flip_core::sac::SacError;
use flip_core::sim::SimError;
use flip_core::trainer::TrainError;

/// A failure with its exit code and a one-word kind for the
/// `error[kind]: message` line.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError { kind: "usage", code: 2, message: m.into() }
    }

    pub fn validation(m: impl Into<String>) -> Self {
        CliError { kind: "validation", code: 3, message: m.into() }
    }

    pub fn runtime(m: impl Into<String>) -> Self {
        CliError { kind: "runtime", code: 4, message: m.into() }
    }

    fn with_kind(mut self, kind: &'static str) -> Self {
        self.kind = kind;
        self
    }

    /// Reading an input that is missing or malformed is a validation error.
    pub fn input(path: &std::path::Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::validation(format!("file not found: {}", path.display())).with_kind("not_found")
        } else {
            CliError::validation(format!("{}: {e}", path.display())).with_kind("io")
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the diagnostic on one line
        let msg = self.message.replace('\n', " ");
        write!(f, "error[{}]: {}", self.kind, msg)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::runtime(e.to_string()).with_kind("io")
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NumericalBlowup { .. } => CliError::runtime(e.to_string()).with_kind("sim"),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Jam { .. } => CliError::runtime(e.to_string()).with_kind("jam"),
            LabError::Sim(s) => s.into(),
            LabError::Domain(_) => CliError::runtime(e.to_string()),
            _ => CliError::validation(e.to_string()),
        }
    }
}

impl From<CalibError> for CliError {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::Lab(l) => l.into(),
            CalibError::Io(io) => io.into(),
            CalibError::InvalidConfig(_) | CalibError::InvalidBounds(_) | CalibError::Json(_) => {
                CliError::validation(e.to_string())
            }
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Sim(s) => s.into(),
            EnvError::InvalidConfig(_) | EnvError::InfeasibleLoad { .. } => CliError::validation(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<SacError> for CliError {
    fn from(e: SacError) -> Self {
        match e {
            SacError::Io(io) => io.into(),
            SacError::VersionMismatch { .. } | SacError::ShapeMismatch(_) | SacError::CorruptCheckpoint(_) => {
                CliError::validation(e.to_string()).with_kind("checkpoint")
            }
            SacError::InvalidConfig(_) => CliError::validation(e.to_string()),
            _ => CliError::runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Env(x) => x.into(),
            TrainError::Agent(x) => x.into(),
            TrainError::InvalidConfig(_) | TrainError::EmptyLevels => CliError::validation(e.to_string()),
            TrainError::Hook(_) => CliError::runtime(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::validation(e.to_string()).with_kind("parse")
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::runtime(e.to_string()).with_kind("io")
    }
}
