//! Run manifests: the resolved config, its content hash and the files a
//! command wrote.
//!
//! A manifest is itself a valid config file. `command`, `config_hash` and
//! `output.*` lines are skipped when it is read back as one, so
//! `sbmt train --config run/manifest.txt` repeats the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sbmt_core::config::RunConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const OUT_DIR_ENV: &str = "SBMT_OUT_DIR";

/// SHA-256 over a git-style blob header and the canonical config text.
pub fn config_hash(cfg: &RunConfig) -> String {
    let text = cfg.to_canonical_string();
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", text.len()).as_bytes());
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub config_hash: String,
    /// `(role, file name relative to the run directory)`.
    pub outputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self { command: command.into(), config: config.clone(), config_hash: config_hash(config), outputs: Vec::new() }
    }

    pub fn output(&mut self, role: &str, file: impl Into<String>) {
        self.outputs.push((role.into(), file.into()));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        out.push_str(&self.config.to_canonical_string());
        for (role, file) in &self.outputs {
            let _ = writeln!(out, "output.{role} = {file}");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_file(&dir.join(MANIFEST_FILE), &self.to_text())
    }
}

/// A config read from disk plus the hash recorded in it, if any.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Hash the file claims for itself, checked against the parsed content.
    pub recorded_hash: Option<String>,
    pub hash_matches: bool,
    /// Hash of the file's settings before overrides.
    pub base_hash: String,
}

fn is_manifest_only(key: &str) -> bool {
    key == "command" || key == "config_hash" || key.starts_with("output.")
}

/// Reads `path` (if given) over the defaults, then applies `overrides` in
/// order. The recorded hash is compared before overrides are applied.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<LoadedConfig, CliError> {
    let mut cfg = RunConfig::default();
    let mut recorded_hash = None;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut kept = String::new();
        for line in text.lines() {
            let body = line.split('#').next().unwrap_or("");
            match body.split_once('=') {
                Some((k, v)) if k.trim() == "config_hash" => recorded_hash = Some(v.trim().to_string()),
                Some((k, _)) if is_manifest_only(k.trim()) => {}
                _ => {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
        cfg.apply_text(&kept)?;
    }
    let base_hash = config_hash(&cfg);
    let hash_matches = recorded_hash.as_ref().is_none_or(|h| *h == base_hash);
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(LoadedConfig { config: cfg, recorded_hash, hash_matches, base_hash })
}

/// `--out-dir` if given, else `$SBMT_OUT_DIR/<name>`, else `runs/<name>`.
pub fn run_dir(explicit: Option<&Path>, name: &str) -> Result<PathBuf, CliError> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from).join(name),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_reads_back_as_its_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "0.25").unwrap();
        cfg.set("seq_len", "32").unwrap();
        let mut m = RunManifest::new("train", &cfg);
        m.output("metrics", "metrics.csv");
        m.write(dir.path()).unwrap();
        let loaded = load_config(Some(&dir.path().join(MANIFEST_FILE)), &[]).unwrap();
        assert_eq!(loaded.config, cfg);
        assert!(loaded.hash_matches);
        assert_eq!(loaded.recorded_hash.as_deref(), Some(config_hash(&cfg).as_str()));
    }

    #[test]
    fn edited_manifest_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let text = RunManifest::new("train", &cfg).to_text().replace("steps = 2000", "steps = 7");
        let path = dir.path().join("m.txt");
        fs::write(&path, text).unwrap();
        let loaded = load_config(Some(&path), &[]).unwrap();
        assert!(!loaded.hash_matches);
        assert_eq!(loaded.config.steps, 7);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        b.set("seed", "1").unwrap();
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
