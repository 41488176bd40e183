use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{CliError, CliResult};
use crate::model::{ModelConfig, ModelError};
use crate::training::{config_hash, TrainConfig};

/// Model and training settings plus data paths, read from a flat
/// `key = value` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Splits config text into ordered `(line, key, value)` entries.
/// Blank lines and `#` comments are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(usize, String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str, base: &Path) -> CliResult<RunConfig> {
        let mut rc = RunConfig::default();
        for (line, k, v) in parse_config_text(text).map_err(CliError::usage)? {
            let v = match k.as_str() {
                "manifest" | "test_manifest" | "out" => base.join(&v).display().to_string(),
                _ => v,
            };
            rc.set(&k, &v).map_err(|e| CliError {
                code: e.code,
                message: format!("config line {line}: {}", e.message),
            })?;
        }
        Ok(rc)
    }

    pub fn from_file(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        RunConfig::from_text(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| CliError {
                code: e.code,
                message: format!("{}: {}", path.display(), e.message),
            })
    }

    /// Sets one key; unknown keys are a usage error.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "test_manifest" => self.test_manifest = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => {
                let used_model = self.model.set(key, value).map_err(|e| match e {
                    ModelError::Mismatch { .. } => CliError::checkpoint(e),
                    other => CliError::usage(other),
                })?;
                let used_train = self.train.set(key, value).map_err(CliError::usage)?;
                if !used_model && !used_train {
                    return Err(CliError::usage(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Model and training keys; paths are excluded so the hash names the
    /// experiment rather than where it ran.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv
    }

    pub fn to_text(&self) -> String {
        let kv = self.to_kv();
        let mut out = format!("# config_hash = {}\n", config_hash(&kv));
        for (k, v) in &kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
        let paths = [("manifest", &self.manifest), ("test_manifest", &self.test_manifest), ("out", &self.out)];
        for (k, p) in paths {
            if let Some(p) = p {
                out.push_str(&format!("{k} = {}\n", p.display()));
            }
        }
        out
    }
}
