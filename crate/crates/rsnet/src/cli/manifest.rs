//! Run manifests: every command writes one, recording exactly what ran so
//! the run can be reproduced bit-for-bit (`rsnet rerun --manifest …`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Record of one command execution.
///
/// `config_text` is the complete effective configuration (defaults and flag
/// overrides applied), so a rerun needs no other files besides the recorded
/// inputs. `duration_secs` is informational: it is the only field expected
/// to differ between a run and its rerun, and data outputs never embed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    /// Version of the binary that produced the run.
    pub version: String,
    /// Subcommand name (`gen-data`, `train`, `eval`, `score-dump`).
    pub command: String,
    /// Master seed, for commands that draw randomness.
    pub seed: Option<u64>,
    /// Thread count the run used.
    pub threads: usize,
    /// Complete effective flat key=value configuration.
    pub config_text: String,
    /// Named input paths, absolute.
    pub inputs: BTreeMap<String, String>,
    /// Named output paths, absolute.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock duration of the run in seconds.
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, threads: usize, config_text: String) -> Self {
        RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            threads,
            config_text,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            duration_secs: 0.0,
        }
    }

    pub fn with_input(mut self, name: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(name.to_string(), absolute_str(path)?);
        Ok(self)
    }

    pub fn with_output(mut self, name: &str, path: &Path) -> Result<Self> {
        self.outputs.insert(name.to_string(), absolute_str(path)?);
        Ok(self)
    }

    /// Recorded input path by name.
    pub fn input(&self, name: &str) -> Result<PathBuf> {
        self.inputs
            .get(name)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Data(format!("manifest records no `{name}` input")))
    }

    /// Recorded output path by name.
    pub fn output(&self, name: &str) -> Result<PathBuf> {
        self.outputs
            .get(name)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Data(format!("manifest records no `{name}` output")))
    }

    /// Atomic write (tmp + rename), done at run end.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("failed to serialize manifest: {e}")))?;
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        fs::write(&tmp, body + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&body)
            .map_err(|e| Error::Data(format!("{}: malformed manifest: {e}", path.display())))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: manifest format version {} unsupported (expected {})",
                path.display(),
                m.format_version,
                MANIFEST_FORMAT_VERSION
            )));
        }
        Ok(m)
    }
}

/// Absolute form of `path` (no filesystem access beyond the cwd lookup).
pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn absolute_str(path: &Path) -> Result<String> {
    Ok(absolute(path)?.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;

    #[test]
    fn manifest_round_trips_and_checks_version() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("gen-data", Some(7), 2, "n_videos = 3\n".into())
            .with_output("out", dir.path())
            .unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.output("out").unwrap(), absolute(dir.path()).unwrap());
        assert_eq!(loaded.input("data").unwrap_err().kind(), ErrorKind::Data);

        let mut value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        value["format_version"] = serde_json::json!(99);
        fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let err = RunManifest::load(&path).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Data);
        assert!(err.to_string().contains("version"), "{err}");
    }
}
