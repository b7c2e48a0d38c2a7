//! Error type of the command-line tool and its exit-code contract.

use std::process::ExitCode;

use ullsnn_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("time-step mismatch: {0}")]
    Mismatch(String),
    #[error("statistics error: {0}")]
    Statistics(String),
}

impl CliError {
    /// 2 config, 3 divergence, 4 artifact, 5 mismatch, 6 statistics.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Artifact(_) => 4,
            CliError::Mismatch(_) => 5,
            CliError::Statistics(_) => 6,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn artifact(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Artifact(format!("{context}: {e}"))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(m) | Error::Argument(m) => CliError::Config(m),
            Error::Divergence { .. } => CliError::Divergence(msg),
            Error::Statistics(m) => CliError::Statistics(m),
            Error::Dimension(_) | Error::Calibration(_) | Error::Format(_) | Error::Io(_) => CliError::Artifact(msg),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_the_contract() {
        let cases = [
            (Error::Config("x".into()), 2),
            (Error::Divergence { epoch: 1, loss: f64::NAN }, 3),
            (Error::Format("x".into()), 4),
            (Error::Calibration("x".into()), 4),
            (Error::Statistics("x".into()), 6),
        ];
        for (e, code) in cases {
            assert_eq!(CliError::from(e).code(), code);
        }
        assert_eq!(CliError::Mismatch(String::new()).code(), 5);
    }
}
