//! Weights file: 8-byte magic, u32 version, u64 header length, JSON header, then the
//! parameters as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorWeights, LossBreakdown, TrainingLog};
use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, GroundGrid};

const MAGIC: &[u8; 8] = b"HYDRAWTS";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    calibs: Vec<CameraCalibration>,
    grid: GroundGrid,
    image_size: [usize; 2],
    n_params: usize,
    final_train: Option<LossBreakdown>,
    final_validation: Option<LossBreakdown>,
}

/// Serialized weights file contents.
pub fn weights_bytes(weights: &DetectorWeights) -> Vec<u8> {
    let header = Header {
        config: weights.config.clone(),
        calibs: weights.calibs.clone(),
        grid: weights.grid.clone(),
        image_size: weights.image_size,
        n_params: weights.params.len(),
        final_train: weights.final_train.clone(),
        final_validation: weights.final_validation.clone(),
    };
    let json = serde_json::to_vec(&header).expect("serializable header");
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * weights.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &weights.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

pub fn write_weights(weights: &DetectorWeights, path: &Path) -> Result<()> {
    let buf = weights_bytes(weights);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<DetectorWeights> {
    let mut buf = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::SchemaMismatch(format!("{}: {m}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a weights file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != WEIGHTS_VERSION {
        return Err(bad(&format!("weights version {version}, expected {WEIGHTS_VERSION}")));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let header: Header = buf
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))
        .and_then(|h| serde_json::from_slice(h).map_err(|e| bad(&e.to_string())))?;
    let body = &buf[20 + hlen..];
    if body.len() != 8 * header.n_params {
        return Err(bad("parameter block has the wrong length"));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut w = DetectorWeights::from_params(header.config, header.calibs, header.grid, header.image_size, params)?;
    w.final_train = header.final_train;
    w.final_validation = header.final_validation;
    Ok(w)
}

/// `epoch,ground,single_view_mean,total` rows for the training loss, plus the same
/// columns for validation when available.
pub fn write_loss_csv(log: &TrainingLog, path: &Path) -> Result<()> {
    let mut s = String::from("epoch,ground,single_view_mean,total,val_ground,val_single_view_mean,val_total\n");
    for r in &log.epochs {
        let t = &r.train;
        s.push_str(&format!("{},{},{},{}", r.epoch, t.ground, t.single_view_mean(), t.total));
        match &r.validation {
            Some(v) => s.push_str(&format!(",{},{},{}\n", v.ground, v.single_view_mean(), v.total)),
            None => s.push_str(",,,\n"),
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
