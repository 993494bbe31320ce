use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CliError, Command};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const OUTPUTS_FILE: &str = "outputs.json";

/// Everything needed to rerun a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Command,
    /// Fully resolved config text, for commands that take one.
    pub config: Option<String>,
    /// Input path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub dataset_hashes: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub code_version: String,
    pub started_unix_ms: u64,
    /// Output files, relative to the output directory.
    pub outputs: Vec<String>,
    pub threads: Option<String>,
}

impl RunManifest {
    pub fn new(args: &Command) -> Self {
        Self {
            command: args.name().to_string(),
            args: args.clone(),
            config: None,
            inputs: BTreeMap::new(),
            dataset_hashes: Vec::new(),
            seeds: BTreeMap::new(),
            code_version: format!("icql {}", env!("CARGO_PKG_VERSION")),
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            outputs: Vec::new(),
            threads: std::env::var("ICQL_THREADS").ok(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self, CliError> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(self)
    }

    /// Creates `out` and writes the manifest into it.
    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_file(&out.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }
}

/// SHA-256 of each output file, written once a command finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub files: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_outputs(out: &Path, files: &[PathBuf]) -> Result<OutputRecord, CliError> {
    let mut rec = OutputRecord { files: BTreeMap::new() };
    for f in files {
        rec.files.insert(f.display().to_string(), hash_file(&out.join(f))?);
    }
    let text = serde_json::to_string_pretty(&rec).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join(OUTPUTS_FILE), text.as_bytes())?;
    Ok(rec)
}

pub fn read_outputs(out: &Path) -> Result<OutputRecord, CliError> {
    let path = out.join(OUTPUTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}
