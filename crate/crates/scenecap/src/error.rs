use std::path::{Path, PathBuf};

/// Failures of the file layer and the commands, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, missing or malformed inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The pipeline itself failed on valid inputs. Exit code 3.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Reading or parsing an input file.
    pub fn input(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    /// Writing an output file.
    pub fn output(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn core(context: &str, e: scenecap_core::Error) -> Self {
        CliError::Runtime(format!("{context}: {e}"))
    }

    pub fn invalid(context: &str, e: scenecap_core::Error) -> Self {
        CliError::Usage(format!("{context}: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::input(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::output(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(|e| CliError::output(path, e))?;
    Ok(path.to_path_buf())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::input(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::output(path, e))?;
    bytes.push(b'\n');
    write(path, &bytes)
}
