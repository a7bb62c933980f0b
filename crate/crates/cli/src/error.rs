use std::fmt;
use std::process::ExitCode;

/// Exit codes of the `rdseg` binary.
pub mod code {
    pub const SUCCESS: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const VALIDATION: u8 = 3;
    pub const IO: u8 = 4;
    pub const DIVERGED: u8 = 5;
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
    Io(String),
    Diverged(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => code::USAGE,
            Failure::Validation(_) => code::VALIDATION,
            Failure::Io(_) => code::IO,
            Failure::Diverged(_) => code::DIVERGED,
            Failure::Internal(_) => code::INTERNAL,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Validation(m) => write!(f, "{m}"),
            Failure::Io(m) => write!(f, "{m}"),
            Failure::Diverged(m) => write!(f, "{m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<rdseg::Error> for Failure {
    fn from(e: rdseg::Error) -> Self {
        use rdseg::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter(_) | E::Shape(_) | E::Validation(_) | E::Incompatible(_) => {
                Failure::Validation(msg)
            }
            E::Diverged(_) => Failure::Diverged(msg),
            E::Io { .. }
            | E::Ingestion(_)
            | E::UnsupportedVersion { .. }
            | E::Corrupt(_)
            | E::Manifest(_) => Failure::Io(msg),
            E::NoForwardRecord => Failure::Internal(msg),
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::Io(format!("I/O error on {}: {e}", path.display()))
}
