use std::fmt::Display;
use std::path::Path;

use fpnas_core::controller_search::SearchError;
use fpnas_core::graph_compiler::CompileError;
use fpnas_core::proxy_task::ProxyError;
use fpnas_core::search_space::GenomeJsonError;

/// A failed command: exit 1 for domain failures, 2 for usage and IO.
#[derive(Debug)]
pub struct Failure {
    pub exit_code: u8,
    pub message: String,
}

impl Failure {
    pub fn domain(message: impl Display) -> Self {
        Failure { exit_code: 1, message: message.to_string() }
    }

    pub fn usage(message: impl Display) -> Self {
        Failure { exit_code: 2, message: message.to_string() }
    }

    pub fn io(path: &Path, err: impl Display) -> Self {
        Failure::usage(format!("io-error: {}: {err}", path.display()))
    }
}

impl From<CompileError> for Failure {
    fn from(e: CompileError) -> Self {
        Failure::domain(e)
    }
}

impl From<GenomeJsonError> for Failure {
    fn from(e: GenomeJsonError) -> Self {
        match e {
            GenomeJsonError::Invalid(_) => Failure::domain(e),
            _ => Failure::usage(e),
        }
    }
}

impl From<ProxyError> for Failure {
    fn from(e: ProxyError) -> Self {
        match e {
            ProxyError::InvalidConfig(_) | ProxyError::LevelMismatch(_) | ProxyError::StageOutOfRange { .. } => {
                Failure::usage(e)
            }
            _ => Failure::domain(e),
        }
    }
}

impl From<SearchError> for Failure {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::InvalidConfig(_) | SearchError::Space(_) => Failure::usage(e),
            SearchError::EvaluationFailed { .. } => Failure::domain(e),
        }
    }
}
