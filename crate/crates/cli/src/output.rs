//! Output directories, artifact writing and the timestamp sidecar.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::CliError;

pub const OUT_ENV: &str = "MAGIC_NAS_OUT";
pub const META_FILE: &str = "meta.json";

/// Resolves the output root: explicit flag, then `MAGIC_NAS_OUT`, then the
/// config value, then `runs`.
pub fn output_root(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Directory holding the artifacts of one subcommand.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
    started: u64,
}

#[derive(Serialize)]
struct Meta<'a> {
    command: &'a str,
    version: &'a str,
    started_unix: u64,
    finished_unix: u64,
    status: &'a str,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunDir {
    pub fn create(path: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&path)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {}", path.display(), e)))?;
        Ok(Self { path, started: now() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.file(name);
        fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e)))
    }

    pub fn write_json<V: Serialize>(&self, name: &str, value: &V) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes the sidecar; timestamps live only here so every other
    /// artifact is a pure function of config and seed.
    pub fn finish(&self, command: &str, status: &str) -> Result<(), CliError> {
        let meta = Meta {
            command,
            version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started,
            finished_unix: now(),
            status,
        };
        self.write_json(META_FILE, &meta)
    }
}
