use std::fmt;
use std::path::Path;

use sioms_core::baseline::BaselineError;
use sioms_core::cache::CacheError;
use sioms_core::montecarlo::MonteCarloError;
use sioms_core::plant::PlantError;
use sioms_core::receding::RhError;
use sioms_core::scenario::LoadError;
use sioms_core::sioms::SiomsError;
use sioms_core::transition::TableError;

/// A failure and the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad scenario file or flag value (exit 2).
    Config(String),
    /// The numerics failed: singular tables, divergence, ... (exit 3).
    Numerical(String),
    /// Reading or writing a file failed (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Io { .. } => CliError::Io(e.to_string()),
            LoadError::Parse(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<SiomsError> for CliError {
    fn from(e: SiomsError) -> Self {
        match e {
            SiomsError::Params(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TableError> for CliError {
    fn from(e: TableError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<PlantError> for CliError {
    fn from(e: PlantError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<RhError> for CliError {
    fn from(e: RhError) -> Self {
        match e {
            RhError::Config(_) => CliError::Config(e.to_string()),
            RhError::Solve(s) => s.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Samples(_) | BaselineError::TimeVarying => CliError::Config(e.to_string()),
            BaselineError::Solve(s) => s.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MonteCarloError> for CliError {
    fn from(e: MonteCarloError) -> Self {
        match e {
            MonteCarloError::Runs | MonteCarloError::Noise { .. } | MonteCarloError::Template(_) => {
                CliError::Config(e.to_string())
            }
            MonteCarloError::Receding(r) => r.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Io { .. } => CliError::Io(e.to_string()),
            CacheError::Table(t) => t.into(),
        }
    }
}
