//! Patch artifact directory: `patch.png` preview, `patch.raw` exact values and
//! `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttackConfig, AttackLogRecord, Patch};
use crate::detector::{weights_bytes, DetectorWeights};
use crate::error::{Error, Result};
use crate::raster::{read_raw, write_png, write_raw};

pub const PATCH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub schema_version: u32,
    pub kind: String,
    /// `alg1`, `alg2`, `baseline-random` or `baseline-singleview`.
    pub method: String,
    pub config: AttackConfig,
    pub victim_sha256: String,
    pub final_total: Option<f64>,
    pub final_attention: Option<f64>,
}

/// SHA-256 of the serialized weights file contents.
pub fn weights_digest(weights: &DetectorWeights) -> String {
    hex::encode(Sha256::digest(weights_bytes(weights)))
}

pub fn write_patch(patch: &Patch, manifest: &PatchManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&patch.values, &dir.join("patch.png"))?;
    write_raw(&patch.values, &dir.join("patch.raw"))?;
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(manifest).expect("serializable")).map_err(|e| Error::io(&p, e))
}

pub fn read_patch(dir: &Path) -> Result<(Patch, PatchManifest)> {
    let p = dir.join("manifest.json");
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: PatchManifest = serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(format!("{}: {e}", p.display())))?;
    if manifest.schema_version != PATCH_VERSION || manifest.kind != "patch" {
        return Err(Error::SchemaMismatch(format!("{}: not a v{PATCH_VERSION} patch manifest", p.display())));
    }
    let values = read_raw(&dir.join("patch.raw"))?;
    if values.channels != 3 || values.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::SchemaMismatch(format!("{}: patch values outside [0, 1]", dir.display())));
    }
    Ok((Patch { values }, manifest))
}

/// `epoch,iter,ground,single_view_mean,attention,total`.
pub fn write_loss_log(log: &[AttackLogRecord], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,iter,ground,single_view_mean,attention,total\n");
    for r in log {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.epoch, r.iter, r.ground, r.single_view_mean, r.attention, r.total));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
