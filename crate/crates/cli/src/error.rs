use std::fmt;
use std::process::ExitCode;

use mmv_core::MmvError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Validation,
    Solver,
    Io,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Validation,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Io,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self.kind {
            Kind::Validation => 2,
            Kind::Solver => 3,
            Kind::Io => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<MmvError> for CliError {
    fn from(e: MmvError) -> Self {
        let kind = match &e {
            MmvError::Solver { .. } | MmvError::Numerical(_) | MmvError::Fit(_) => Kind::Solver,
            MmvError::Io(_) => Kind::Io,
            MmvError::Json(j) if j.is_io() => Kind::Io,
            MmvError::Csv(c) if c.is_io_error() => Kind::Io,
            _ => Kind::Validation,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        MmvError::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        MmvError::from(e).into()
    }
}
