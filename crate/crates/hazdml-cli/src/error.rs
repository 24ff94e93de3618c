//! Command outcome classification and exit codes.

use std::fmt;

/// Failure classes with a stable exit-code contract:
/// usage errors exit 1, data errors 2, numerical failures 3.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, or an inconsistent request.
    Usage(String),
    /// Unreadable or malformed data and artifact files.
    Data(String),
    /// Optimizer, factorization, or solve failures.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    /// Prefixes the message with the pipeline stage that produced it.
    pub fn stage(self, stage: &str) -> CliError {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{stage}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{stage}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{stage}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<hazdml::panel::PanelError> for CliError {
    fn from(e: hazdml::panel::PanelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<hazdml::evidence::EvidenceError> for CliError {
    fn from(e: hazdml::evidence::EvidenceError) -> Self {
        match e {
            // Degenerate data, not a solver breakdown.
            hazdml::evidence::EvidenceError::NoEvents => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<hazdml::crossfit::CrossfitError> for CliError {
    fn from(e: hazdml::crossfit::CrossfitError) -> Self {
        match e {
            hazdml::crossfit::CrossfitError::NoArmRows(_)
            | hazdml::crossfit::CrossfitError::NoUntreatedRows => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<hazdml::debias::DebiasError> for CliError {
    fn from(e: hazdml::debias::DebiasError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<hazdml::kernel::KernelError> for CliError {
    fn from(e: hazdml::kernel::KernelError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

/// IO on user-supplied data or artifact files.
pub fn data_io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
