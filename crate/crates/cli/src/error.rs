use std::fmt;
use std::path::PathBuf;

use csr_core::CsrError;

#[derive(Debug)]
pub enum CliError {
    /// Config file unreadable, malformed or out of range.
    Config(String),
    /// A stage input that an earlier command should have produced.
    Missing {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
    },
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } | CliError::Run(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing { what, path, producer } => {
                write!(f, "missing {what} at {} (run `csr {producer}` first)", path.display())
            }
            CliError::Run(m) => f.write_str(m),
        }
    }
}

impl From<CsrError> for CliError {
    fn from(e: CsrError) -> Self {
        match e {
            CsrError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Run(other.to_string()),
        }
    }
}
