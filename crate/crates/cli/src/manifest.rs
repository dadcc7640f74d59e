use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments that reproduce the run, seed included.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub input: Option<String>,
    pub input_sha256: Option<String>,
    /// File name in the output directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub timestamp: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects written files and their hashes.
pub struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: BTreeMap::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.outputs = self.files;
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

pub fn load(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Fails when the recorded input no longer hashes to the recorded value.
pub fn check_input(m: &RunManifest) -> Result<()> {
    if let (Some(input), Some(expected)) = (&m.input, &m.input_sha256) {
        let actual = sha256_file(Path::new(input))?;
        if &actual != expected {
            bail!("input {input} has changed since the run (sha256 {actual}, manifest records {expected})");
        }
    }
    Ok(())
}

/// Names of files whose hashes differ between two manifests.
pub fn mismatched_outputs(recorded: &RunManifest, replayed: &RunManifest) -> Vec<String> {
    let mut names: Vec<String> = recorded
        .outputs
        .iter()
        .filter(|(k, v)| replayed.outputs.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    names.extend(replayed.outputs.keys().filter(|k| !recorded.outputs.contains_key(*k)).cloned());
    names
}
