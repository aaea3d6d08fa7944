use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] locprod::Error),

    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Machine-readable failure written to stderr and, when possible, to the
/// run directory.
#[derive(Debug, Serialize)]
pub struct ErrorPayload {
    pub status: &'static str,
    pub exit_code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 3 for numerical failures, 2 for everything attributable to inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    pub fn payload(&self) -> ErrorPayload {
        ErrorPayload {
            status: "error",
            exit_code: self.exit_code(),
            kind: match self {
                CliError::Config(_) => "config",
                CliError::Core(e) => e.kind(),
                CliError::Io { .. } => "io",
            },
            message: self.to_string(),
        }
    }
}
