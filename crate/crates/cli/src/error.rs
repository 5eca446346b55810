use std::process::ExitCode;

use procalloc::eval::EvalError;
use procalloc::mdp::MdpError;
use procalloc::model::ModelError;
use procalloc::policy::PolicyFileError;
use procalloc::rollout::RolloutError;

/// Failures of a command, split by exit status: bad input (2) versus a run
/// that could not complete (3).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(3),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PolicyFileError> for CliError {
    fn from(e: PolicyFileError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MdpError> for CliError {
    fn from(e: MdpError) -> Self {
        match e {
            MdpError::NotConverged { .. } | MdpError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownReference(_) | EvalError::TooFew { .. } => CliError::Config(e.to_string()),
            EvalError::Training(inner) => (*inner).into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Config(_) => CliError::Config(e.to_string()),
            RolloutError::Eval(inner) => inner.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
