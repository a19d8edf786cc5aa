use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sgt_core::Error),
    #[error("training diverged after {steps_completed} steps, last good checkpoint at {checkpoint}: {source}")]
    Diverged {
        steps_completed: usize,
        checkpoint: String,
        #[source]
        source: sgt_core::Error,
    },
    #[error("hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch { path: String, expected: String, found: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn format(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Format { .. } => "format",
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::Core(sgt_core::Error::Config(_)) => "config",
            CliError::Core(sgt_core::Error::Divergence { .. }) | CliError::Diverged { .. } => "divergence",
            CliError::Core(_) => "compute",
            CliError::HashMismatch { .. } => "hash-mismatch",
        }
    }

    /// Process exit code; distinct per kind so scripts can branch on it.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "format" | "hash-mismatch" => 5,
            "divergence" => 6,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_is_machine_readable() {
        let e = CliError::Config("bad".into());
        let v = e.to_json();
        assert_eq!(v["error"]["kind"], "config");
        assert_eq!(v["error"]["exit_code"], 3);
        let back: serde_json::Value = serde_json::from_str(&v.to_string()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn core_errors_keep_their_kind() {
        let e: CliError = sgt_core::Error::Config("x".into()).into();
        assert_eq!(e.kind(), "config");
        let e: CliError = sgt_core::Error::EmptyInput.into();
        assert_eq!(e.kind(), "compute");
        assert_ne!(e.exit_code(), 0);
    }
}
