//! CLI-level error type: wraps the library's error taxonomy and adds the
//! configuration/file-handling failures only a binary can have. Every error
//! maps onto one of three process exit codes.

use hetfx_core::ErrorCategory;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Exit code for configuration problems (bad config file, bad flags,
/// unknown columns, unreadable inputs named by the user).
pub const EXIT_CONFIG: u8 = 2;
/// Exit code for data that parsed but violates validation invariants.
pub const EXIT_VALIDATION: u8 = 3;
/// Exit code for estimation failures on valid data.
pub const EXIT_ESTIMATION: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hetfx_core::Error),

    /// Configuration problems: unparseable config files, invalid flag
    /// combinations, references to unknown columns, unreadable paths.
    #[error("config error: {0}")]
    Config(String),

    /// Input data that parsed but is not usable as data.
    #[error("validation error: {0}")]
    Validation(String),

    /// A pipeline stage failed; carries the stage name so operators can see
    /// where a long run died.
    #[error("stage `{stage}` failed: {source}")]
    Staged {
        stage: String,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => ErrorCategory::Config,
            CliError::Validation(_) => ErrorCategory::Validation,
            CliError::Staged { source, .. } => source.category(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            ErrorCategory::Config => EXIT_CONFIG,
            ErrorCategory::Validation => EXIT_VALIDATION,
            ErrorCategory::Estimation => EXIT_ESTIMATION,
        }
    }

    /// Wraps the error with the pipeline stage it occurred in, preserving
    /// its category (and therefore its exit code).
    pub fn in_stage(self, stage: &str) -> CliError {
        CliError::Staged {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

/// Shorthand for read/write failures on a path the user configured.
pub fn io_config(context: &str, err: std::io::Error) -> CliError {
    CliError::Config(format!("{context}: {err}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use hetfx_core::Error;

    #[test]
    fn exit_codes_follow_the_error_category() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Validation("x".into()).exit_code(), 3);
        assert_eq!(
            CliError::Core(Error::Estimation("x".into())).exit_code(),
            4
        );
        assert_eq!(
            CliError::Core(Error::NonBinaryTreatment { row: 3, value: 2.0 }).exit_code(),
            3
        );
        assert_eq!(
            CliError::Core(Error::InvalidParam("x".into())).exit_code(),
            2
        );
    }

    #[test]
    fn staging_preserves_the_inner_category_and_names_the_stage() {
        let err = CliError::Core(Error::Estimation("ran out of variation".into()))
            .in_stage("causal_forest");
        assert_eq!(err.exit_code(), 4);
        let text = err.to_string();
        assert!(text.contains("causal_forest"), "{text}");
        assert!(text.contains("ran out of variation"), "{text}");
    }
}
