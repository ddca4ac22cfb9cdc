use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::exit::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "STARFLOW_OUT";

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timestamps {
    pub started: u64,
    pub finished: u64,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    /// Hash over the command, the resolved config and every input.
    pub input_hash: String,
    pub timestamps: Timestamps,
    /// Relative to the manifest's directory, sorted.
    pub outputs: Vec<String>,
}

/// Seconds since the epoch, pinned by `SOURCE_DATE_EPOCH` when set.
pub fn now() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash: SHA-256 of `"blob <len>\0"` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// Blob hash of a file, or a tree hash over the sorted relative paths and
/// blob hashes of every file below a directory.
pub fn path_hash(path: &Path) -> Result<String, CliError> {
    let meta = fs::metadata(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    if meta.is_file() {
        let bytes = fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        return Ok(blob_hash(&bytes));
    }
    let mut listing = String::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::input(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(path).expect("walk stays below root");
        let bytes = fs::read(entry.path())
            .map_err(|e| CliError::input(format!("{}: {e}", entry.path().display())))?;
        listing.push_str(&format!("{} {}\n", blob_hash(&bytes), rel.display()));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", listing.len()).as_bytes());
    h.update(listing.as_bytes());
    Ok(hex(&h.finalize()))
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seed: u64,
    inputs: Vec<InputRecord>,
    started: u64,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::input(e.to_string()))?;
        Ok(ManifestBuilder {
            command: command.into(),
            config,
            seed,
            inputs: Vec::new(),
            started: now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            hash: path_hash(path)?,
        });
        Ok(())
    }

    pub fn input_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update([0]);
        h.update(self.config.to_string().as_bytes());
        h.update([0]);
        h.update(self.seed.to_le_bytes());
        for i in &self.inputs {
            h.update(i.hash.as_bytes());
        }
        hex(&h.finalize())
    }

    /// Writes the manifest into `dir`, listing `outputs` relative to it.
    pub fn finish(self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
        self.write(&dir.join(MANIFEST_FILE), dir, outputs)
    }

    /// Writes the manifest of a single-file output next to it, as
    /// `<file>.manifest.json`.
    pub fn finish_beside(self, output: &Path, extra: &[PathBuf]) -> Result<PathBuf, CliError> {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let mut outputs = vec![output.to_path_buf()];
        outputs.extend_from_slice(extra);
        let base = output.parent().unwrap_or(Path::new(""));
        self.write(&output.with_file_name(name), base, &outputs)
    }

    fn write(self, path: &Path, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
        let mut rel: Vec<String> = outputs
            .iter()
            .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
            .collect();
        rel.sort();
        let input_hash = self.input_hash();
        let m = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            input_hash,
            timestamps: Timestamps {
                started: self.started,
                finished: now(),
            },
            outputs: rel,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::input(e.to_string()))? + "\n";
        fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Ok(path.to_path_buf())
    }
}

/// The directory a command writes into: `--out` if given, else a
/// hash-named directory under the output root. It must not already hold a
/// run manifest.
pub fn output_dir(explicit: Option<&Path>, builder: &ManifestBuilder) -> Result<PathBuf, CliError> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ENV).ok_or_else(|| {
                CliError::input(format!("no output directory: pass --out or set {OUT_ENV}"))
            })?;
            let hash = builder.input_hash();
            PathBuf::from(root).join(format!("{}-{}", builder.command, &hash[..12]))
        }
    };
    if dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::input(format!("{} already holds a run", dir.display())));
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_of_empty_content_is_fixed() {
        // sha256 of the 7 bytes "blob 0\0"
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }
}
