use std::fs;
use std::path::{Path, PathBuf};

use nodalglue::GlueError;
use serde::Serialize;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    /// A model or parameter rejected by the library.
    Model(GlueError),
    Io(String),
    Numerical(GlueError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Model(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) | CliError::Model(_) => "validation",
            CliError::Io(_) => "io",
            CliError::Numerical(_) => "numerical",
        }
    }

    fn code(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "invalid_config",
            CliError::Io(_) => "io",
            CliError::Model(e) | CliError::Numerical(e) => e.code(),
        }
    }

    pub fn to_json(&self) -> String {
        let message = match self {
            CliError::Validation(m) | CliError::Io(m) => m.clone(),
            CliError::Model(e) | CliError::Numerical(e) => e.to_string(),
        };
        serde_json::json!({ "error": { "kind": self.kind(), "code": self.code(), "message": message } }).to_string()
    }
}

impl From<GlueError> for CliError {
    fn from(e: GlueError) -> Self {
        match e {
            GlueError::Threshold { .. }
            | GlueError::TooLarge { .. }
            | GlueError::Iteration { .. }
            | GlueError::Singular(_)
            | GlueError::Rank(_)
            | GlueError::Resolution(_) => CliError::Numerical(e),
            other => CliError::Model(other),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Artifacts collected during a run and written in order once it succeeds.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(vec![]);
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        self.files.push((name.into(), bytes));
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(format!("{name}: {e}")))?;
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
        Ok(())
    }

    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.files
            .iter()
            .map(|(name, bytes)| {
                let path = dir.join(name);
                fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
                Ok(path)
            })
            .collect()
    }
}
