//! Run manifest and output-directory helpers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_JSON: &str = "manifest.json";
pub const THREADS_ENV: &str = "GSC_THREADS";

/// Written last; `gsc run --config manifest.json` repeats the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Always `gsc`.
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Value of `GSC_THREADS` when set.
    pub threads: Option<usize>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, seed: u64, threads: Option<usize>, started_unix: u64) -> Self {
        RunManifest {
            tool: "gsc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seed,
            threads,
            started_unix,
            finished_unix: started_unix,
            outputs: Vec::new(),
        }
    }

    /// Stamps the end time and writes the manifest atomically into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
        self.finished_unix = unix_now();
        self.outputs = outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned())
            .collect();
        let path = dir.join(MANIFEST_JSON);
        write_atomic(&path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses a `GSC_THREADS` value; unset means no cap.
pub fn parse_threads(value: Option<&str>) -> Result<Option<usize>, CliError> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))),
        },
    }
}

pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    parse_threads(std::env::var(THREADS_ENV).ok().as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threads_values() {
        assert_eq!(parse_threads(None).unwrap(), None);
        assert_eq!(parse_threads(Some("4")).unwrap(), Some(4));
        assert!(parse_threads(Some("0")).is_err());
        assert!(parse_threads(Some("many")).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("run", RunConfig::default(), 3, Some(2), 10);
        let p = m.clone().finish(dir.path(), &[dir.path().join("summary.csv")]).unwrap();
        let back: RunManifest = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back.outputs, vec!["summary.csv".to_string()]);
        assert_eq!(back.config, m.config);
        assert!(back.finished_unix >= 10);
        assert!(!dir.path().join("manifest.tmp").exists());
    }
}
