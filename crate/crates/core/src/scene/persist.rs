//! Dataset directory layout:
//!
//! ```text
//! meta.json                 schema version, seed, config echo, frame ids
//! calib/view<k>.json        one calibration record per view
//! frames/<id>/view<k>.png   8-bit preview
//! frames/<id>/view<k>.raw   exact f64 pixels
//! frames/<id>/truth.json    ground truth
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, GroundTruth, MultiviewFrame, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::CameraCalibration;
use crate::raster::{read_png, read_raw, write_png, write_raw, Image};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    schema_version: u32,
    kind: String,
    seed: u64,
    config: SceneConfig,
    frame_ids: Vec<usize>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))
}

fn frame_dir(root: &Path, frame_id: usize) -> std::path::PathBuf {
    root.join("frames").join(format!("{frame_id:06}"))
}

pub fn persist_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("calib"))?;
    for calib in &dataset.calibs {
        write_json(calib, &dir.join("calib").join(format!("view{}.json", calib.view_id)))?;
    }
    for frame in &dataset.frames {
        let fd = frame_dir(dir, frame.frame_id);
        mkdir(&fd)?;
        for (k, img) in frame.images.iter().enumerate() {
            write_png(img, &fd.join(format!("view{k}.png")))?;
            write_raw(img, &fd.join(format!("view{k}.raw")))?;
        }
        write_json(&frame.truth, &fd.join("truth.json"))?;
    }
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        kind: "dataset".into(),
        seed: dataset.seed,
        config: dataset.config.clone(),
        frame_ids: dataset.frames.iter().map(|f| f.frame_id).collect(),
    };
    write_json(&meta, &dir.join("meta.json"))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    if meta.schema_version != SCHEMA_VERSION || meta.kind != "dataset" {
        return Err(Error::SchemaMismatch(format!(
            "{}: expected dataset schema {SCHEMA_VERSION}, found {} v{}",
            dir.display(),
            meta.kind,
            meta.schema_version
        )));
    }
    let n = meta.config.num_views;
    let calibs = (0..n)
        .map(|k| read_json::<CameraCalibration>(&dir.join("calib").join(format!("view{k}.json"))))
        .collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(meta.frame_ids.len());
    for &frame_id in &meta.frame_ids {
        let fd = frame_dir(dir, frame_id);
        let mut images = Vec::with_capacity(n);
        for k in 0..n {
            let p = fd.join(format!("view{k}.raw"));
            if !p.exists() {
                return Err(Error::SchemaMismatch(format!("missing view file {}", p.display())));
            }
            images.push(read_raw(&p)?);
        }
        let truth: GroundTruth = read_json(&fd.join("truth.json"))?;
        if truth.num_views() != n || images.iter().any(|im| im.height != meta.config.image_size[0] || im.width != meta.config.image_size[1]) {
            return Err(Error::SchemaMismatch(format!("frame {frame_id} does not match the dataset config")));
        }
        frames.push(MultiviewFrame { frame_id, images, truth });
    }
    Ok(Dataset { config: meta.config, seed: meta.seed, calibs, frames })
}

/// Reads the 8-bit preview of one view (lossy; quantized to 1/255).
pub fn load_view_png(dir: &Path, frame_id: usize, view: usize) -> Result<Image> {
    read_png(&frame_dir(dir, frame_id).join(format!("view{view}.png")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_dataset;

    fn tiny() -> Dataset {
        let cfg = SceneConfig { train_frames: 2, test_frames: 1, ..SceneConfig::default() };
        generate_dataset(&cfg, 21).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        persist_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_view_is_schema_mismatch() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        persist_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(frame_dir(dir.path(), 1).join("view2.raw")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        persist_dataset(&ds, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let text = std::fs::read_to_string(&meta_path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&meta_path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn png_reload_within_quantization() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        persist_dataset(&ds, dir.path()).unwrap();
        for f in &ds.frames {
            for (k, raw) in f.images.iter().enumerate() {
                let png = load_view_png(dir.path(), f.frame_id, k).unwrap();
                let max = png.data.iter().zip(&raw.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(max <= 1.0 / 255.0, "{max}");
            }
        }
    }
}
