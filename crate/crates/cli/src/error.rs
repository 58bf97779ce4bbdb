use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }

    fn status(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config_error",
            CliError::Numerical(_) => "numerical_failure",
            CliError::Io(_) => "io_error",
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            status: &'a str,
            exit_code: i32,
            message: String,
        }
        let r = Report { status: self.status(), exit_code: self.exit_code(), message: self.to_string() };
        serde_json::to_string_pretty(&r).expect("plain struct serializes")
    }

    /// Best effort: the directory may be the reason we failed.
    pub fn write_to(&self, dir: &Path) {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), self.to_json() + "\n");
        }
    }
}

impl From<dynport::Error> for CliError {
    fn from(e: dynport::Error) -> Self {
        match e {
            dynport::Error::Io(e) => CliError::Io(e.to_string()),
            dynport::Error::Json(e) => CliError::Io(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
