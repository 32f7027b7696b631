use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

/// Record of one command invocation. Written before any work starts and
/// rewritten with the final status and output hashes on exit. Carries no
/// timestamps, so reruns produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Canonical config text, when the command has one.
    pub config: Option<String>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub status: String,
    pub output_sha256: BTreeMap<String, String>,
    #[serde(skip)]
    dir: PathBuf,
}

impl Manifest {
    pub fn begin(dir: &Path, command: &str, args: Vec<String>) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let m = Self {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args,
            seed: None,
            config: None,
            outputs: BTreeMap::new(),
            status: "running".to_string(),
            output_sha256: BTreeMap::new(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn output(&mut self, name: &str, file: &str) -> PathBuf {
        let path = self.dir.join(file);
        self.outputs.insert(name.to_string(), path.clone());
        path
    }

    pub fn write(&self) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(self.dir.join(FILE_NAME), text + "\n")
    }

    /// Hash every existing output and record the final status.
    pub fn finish(&mut self, status: &str) -> std::io::Result<()> {
        self.status = status.to_string();
        self.output_sha256.clear();
        for (name, path) in &self.outputs {
            if let Ok(bytes) = fs::read(path) {
                self.output_sha256
                    .insert(name.clone(), hex::encode(Sha256::digest(&bytes)));
            }
        }
        self.write()
    }
}
