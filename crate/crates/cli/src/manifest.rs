use std::collections::BTreeMap;
use std::path::Path;

use hydra_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Input name to SHA-256 of its content.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Free-form command parameters.
    pub params: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            schema_version: MANIFEST_VERSION,
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.insert(name.into(), hash_path(path)?);
        Ok(self)
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.insert(key.into(), value.to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(self).expect("serializable").as_bytes())
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source: e }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// SHA-256 of a file, or of a directory as the sorted list of relative paths and file
/// contents. Provenance files inside the tree are skipped so provenance does not feed back
/// into content hashes.
pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            let bytes = std::fs::read(path.join(&rel)).map_err(|e| io_err(&path.join(&rel), e))?;
            h.update(rel.as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(std::fs::read(path).map_err(|e| io_err(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != PROVENANCE_FILE) {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
