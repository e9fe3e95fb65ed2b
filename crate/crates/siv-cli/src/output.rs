use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::TempDir;

use siv_core::SivError;

#[derive(Debug)]
pub enum CliError {
    Core(SivError),
    Io(String),
    Usage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
            CliError::Usage(e) => write!(f, "usage error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<SivError> for CliError {
    fn from(e: SivError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub shots: Option<u64>,
    pub temperature_k: Option<f64>,
    pub config_sha256: String,
    pub outputs: Vec<String>,
}

/// Files are written into a hidden directory under `out` and only moved into place once
/// the whole command has succeeded; dropping a `Staging` discards everything it holds.
pub struct Staging {
    dir: TempDir,
    out: PathBuf,
    files: Vec<String>,
}

impl Staging {
    pub fn new(out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out)?;
        let dir = tempfile::Builder::new().prefix(".siv-staging-").tempdir_in(out)?;
        Ok(Self { dir, out: out.to_path_buf(), files: Vec::new() })
    }

    fn claim(&mut self, name: &str) -> CliResult<PathBuf> {
        if self.files.iter().any(|f| f == name) {
            return Err(CliError::Io(format!("output {name} written twice")));
        }
        self.files.push(name.to_string());
        Ok(self.dir.path().join(name))
    }

    pub fn csv<S: Serialize>(&mut self, name: &str, rows: &[S]) -> CliResult<()> {
        let path = self.claim(name)?;
        let mut w = csv::Writer::from_path(path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn json<S: Serialize>(&mut self, name: &str, value: &S) -> CliResult<()> {
        let path = self.claim(name)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    /// Writes the manifest and moves every staged file into the output directory.
    pub fn commit(mut self, mut manifest: Manifest) -> CliResult<Vec<PathBuf>> {
        manifest.outputs = self.files.clone();
        let name = format!("{}.manifest.json", manifest.command);
        self.json(&name, &manifest)?;
        let mut moved = Vec::new();
        for f in &self.files {
            let dest = self.out.join(f);
            if let Err(e) = fs::rename(self.dir.path().join(f), &dest) {
                for m in &moved {
                    let _ = fs::remove_file(m);
                }
                return Err(e.into());
            }
            moved.push(dest);
        }
        Ok(moved)
    }
}
