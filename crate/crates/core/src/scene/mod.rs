//! Synthetic calibrated multi-camera pedestrian scenes with ground truth.
//!
//! Every frame is generated from its own ChaCha8 stream seeded with
//! `splitmix64(dataset_seed ^ splitmix64(frame_id))`, so frames are independent and the
//! raw float output is bit-reproducible across runs and platforms.

mod persist;
mod render;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, GroundGrid, PixelRect};
use crate::raster::Image;

pub use persist::{load_dataset, load_view_png, persist_dataset, SCHEMA_VERSION};
pub use render::{render_background, render_frame, sample_clutter, Blotch, SceneState};

/// Placement of the cameras around the grid: half of them on the west side looking east,
/// the rest on the east side looking west, all aimed at the grid center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigConfig {
    pub focal: f64,
    pub camera_height: f64,
    /// Horizontal distance of the cameras outside the grid edge (m).
    pub distance: f64,
    /// Half-range of camera positions along the grid side (m).
    pub lateral_spread: f64,
    /// Height of the look-at point above the grid center (m).
    pub target_height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_views: usize,
    /// (height, width) of every view.
    pub image_size: [usize; 2],
    pub grid: GroundGrid,
    pub rig: RigConfig,
    pub pedestrians_min: usize,
    pub pedestrians_max: usize,
    pub min_separation: f64,
    /// Distance from the grid border kept free of pedestrians (m).
    pub placement_margin: f64,
    pub train_frames: usize,
    pub test_frames: usize,
    /// Upper bound on flat ground stains and shadows per frame.
    pub clutter_max: usize,
    pub noise_sigma: f64,
    pub visibility_threshold: f64,
    /// Gaussian width of the ground occupancy target, in cells.
    pub occupancy_sigma_cells: f64,
    /// Gaussian width of the head/foot targets, in image pixels.
    pub keypoint_sigma_px: f64,
    /// Image-to-map downsampling of the head/foot maps.
    pub map_stride: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_views: 4,
            image_size: [96, 96],
            grid: GroundGrid { origin: [0.0, 0.0], cell_size: 0.25, shape: (24, 24) },
            rig: RigConfig { focal: 110.0, camera_height: 3.0, distance: 2.0, lateral_spread: 1.5, target_height: 0.8 },
            pedestrians_min: 1,
            pedestrians_max: 5,
            min_separation: 0.6,
            placement_margin: 0.5,
            train_frames: 200,
            test_frames: 40,
            clutter_max: 4,
            noise_sigma: 0.01,
            visibility_threshold: 0.3,
            occupancy_sigma_cells: 1.0,
            keypoint_sigma_px: 2.0,
            map_stride: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        self.grid.validate()?;
        if self.num_views < 2 {
            return bad("num_views must be >= 2");
        }
        if self.image_size[0] % self.map_stride != 0 || self.image_size[1] % self.map_stride != 0 || self.map_stride == 0 {
            return bad("image_size must be a multiple of map_stride");
        }
        if self.pedestrians_min > self.pedestrians_max {
            return bad("pedestrians_min > pedestrians_max");
        }
        if !(self.min_separation > 0.0) || self.placement_margin < 0.0 || self.noise_sigma < 0.0 {
            return bad("min_separation must be positive; margin and noise non-negative");
        }
        if !(0.0..=1.0).contains(&self.visibility_threshold) {
            return bad("visibility_threshold must lie in [0, 1]");
        }
        let [lx, ly] = self.placement_extent();
        if lx < 0.0 || ly < 0.0 {
            return bad("placement_margin leaves no room on the grid");
        }
        // Square packing at the minimum separation bounds how many pedestrians fit.
        let capacity = ((lx / self.min_separation).floor() as usize + 1) * ((ly / self.min_separation).floor() as usize + 1);
        if self.pedestrians_max > capacity {
            return Err(Error::ConfigInvalid(format!(
                "pedestrians_max = {} exceeds grid capacity {} at min_separation {}",
                self.pedestrians_max, capacity, self.min_separation
            )));
        }
        Ok(())
    }

    fn placement_extent(&self) -> [f64; 2] {
        let m = self.grid.extent_max();
        [
            m[0] - self.grid.origin[0] - 2.0 * self.placement_margin,
            m[1] - self.grid.origin[1] - 2.0 * self.placement_margin,
        ]
    }

    pub fn map_shape(&self) -> (usize, usize) {
        (self.image_size[0] / self.map_stride, self.image_size[1] / self.map_stride)
    }

    pub fn total_frames(&self) -> usize {
        self.train_frames + self.test_frames
    }

    /// Builds the camera rig described by `rig`.
    pub fn build_rig(&self) -> Result<Vec<CameraCalibration>> {
        let n_west = self.num_views.div_ceil(2);
        let n_east = self.num_views - n_west;
        let g = &self.grid;
        let max = g.extent_max();
        let (cx, cy) = ((g.origin[0] + max[0]) / 2.0, (g.origin[1] + max[1]) / 2.0);
        let target = Vector3::new(cx, cy, self.rig.target_height);
        let lateral = |i: usize, n: usize| {
            if n == 1 {
                cy
            } else {
                cy - self.rig.lateral_spread + 2.0 * self.rig.lateral_spread * i as f64 / (n - 1) as f64
            }
        };
        let size = (self.image_size[0], self.image_size[1]);
        let mut calibs = Vec::with_capacity(self.num_views);
        for i in 0..n_west {
            let center = Vector3::new(g.origin[0] - self.rig.distance, lateral(i, n_west), self.rig.camera_height);
            calibs.push(CameraCalibration::look_at(calibs.len(), self.rig.focal, size, center, target)?);
        }
        for i in 0..n_east {
            let center = Vector3::new(max[0] + self.rig.distance, lateral(i, n_east), self.rig.camera_height);
            calibs.push(CameraCalibration::look_at(calibs.len(), self.rig.focal, size, center, target)?);
        }
        Ok(calibs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pedestrian {
    pub id: usize,
    pub ground_position: [f64; 2],
    pub height: f64,
    pub width: f64,
    pub appearance_seed: u64,
}

/// Dense row-major score grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn same_shape(&self, other: &ScoreMap) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Max-combines an isotropic Gaussian bump of peak 1 centered at continuous
    /// `(col, row)` coordinates where integers are cell centers.
    pub fn splat_max(&mut self, center: [f64; 2], sigma: f64) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        let reach = (4.0 * sigma).ceil() as i64;
        let (c0, r0) = (center[0].round() as i64, center[1].round() as i64);
        for r in (r0 - reach).max(0)..=(r0 + reach).min(self.rows as i64 - 1) {
            for c in (c0 - reach).max(0)..=(c0 + reach).min(self.cols as i64 - 1) {
                let d2 = (c as f64 - center[0]).powi(2) + (r as f64 - center[1]).powi(2);
                let v = (-d2 * inv).exp();
                let i = r as usize * self.cols + c as usize;
                if v > self.data[i] {
                    self.data[i] = v;
                }
            }
        }
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::MIN, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMap {
    pub grid: GroundGrid,
    pub scores: ScoreMap,
}

/// Per-view annotation of one pedestrian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewAnnotation {
    pub visible: bool,
    /// Fraction of the rendered body that is unoccluded and inside the image.
    pub visible_fraction: f64,
    /// Continuous body rectangle `[x_min, x_max, y_min, y_max]` (may exceed the image).
    pub body: [f64; 4],
    /// Body rectangle clipped to the image, if anything remains.
    pub body_rect: Option<PixelRect>,
    pub head_pixel: [f64; 2],
    pub foot_pixel: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pedestrians: Vec<Pedestrian>,
    pub occupancy: OccupancyMap,
    pub head_maps: Vec<ScoreMap>,
    pub foot_maps: Vec<ScoreMap>,
    /// `annotations[view][pedestrian]`.
    pub annotations: Vec<Vec<ViewAnnotation>>,
}

impl GroundTruth {
    pub fn num_views(&self) -> usize {
        self.head_maps.len()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.pedestrians.iter().map(|p| p.ground_position).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiviewFrame {
    pub frame_id: usize,
    pub images: Vec<Image>,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub seed: u64,
    pub calibs: Vec<CameraCalibration>,
    pub frames: Vec<MultiviewFrame>,
}

impl Dataset {
    pub fn train(&self) -> &[MultiviewFrame] {
        &self.frames[..self.config.train_frames.min(self.frames.len())]
    }

    pub fn test(&self) -> &[MultiviewFrame] {
        &self.frames[self.config.train_frames.min(self.frames.len())..]
    }

    pub fn grid(&self) -> &GroundGrid {
        &self.config.grid
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn frame_seed(seed: u64, frame_id: usize) -> u64 {
    splitmix64(seed ^ splitmix64(frame_id as u64))
}

/// Samples pedestrians uniformly inside the placement area with rejection on the
/// minimum separation.
pub fn sample_pedestrians(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Pedestrian>> {
    let count = rng.random_range(config.pedestrians_min..=config.pedestrians_max);
    let lo = [config.grid.origin[0] + config.placement_margin, config.grid.origin[1] + config.placement_margin];
    let [lx, ly] = config.placement_extent();
    let mut peds: Vec<Pedestrian> = Vec::with_capacity(count);
    let mut attempts = 0;
    while peds.len() < count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::ConfigInvalid(format!(
                "could not place {count} pedestrians at min_separation {}",
                config.min_separation
            )));
        }
        let pos = [lo[0] + rng.random::<f64>() * lx, lo[1] + rng.random::<f64>() * ly];
        let ok = peds.iter().all(|p| {
            let d = ((p.ground_position[0] - pos[0]).powi(2) + (p.ground_position[1] - pos[1]).powi(2)).sqrt();
            d >= config.min_separation
        });
        if !ok {
            continue;
        }
        peds.push(Pedestrian {
            id: peds.len(),
            ground_position: pos,
            height: rng.random_range(1.5..=2.0),
            width: rng.random_range(0.4..=0.7),
            appearance_seed: rng.random(),
        });
    }
    Ok(peds)
}

/// Generates `train_frames + test_frames` frames; the first `train_frames` are the
/// training split.
pub fn generate_dataset(config: &SceneConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let calibs = config.build_rig()?;
    let background = render_background(config, &calibs, seed)?;
    let frames = (0..config.total_frames())
        .into_par_iter()
        .map(|frame_id| {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, frame_id));
            let pedestrians = sample_pedestrians(config, &mut rng)?;
            let clutter = sample_clutter(config, &mut rng);
            let state = SceneState { frame_id, pedestrians, clutter, noise_seed: rng.random() };
            render_frame(config, &state, &calibs, &background)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: config.clone(), seed, calibs, frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::world_to_pixel;

    fn small_config(train: usize, test: usize) -> SceneConfig {
        SceneConfig { train_frames: train, test_frames: test, ..SceneConfig::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config(3, 1);
        let a = generate_dataset(&cfg, 11).unwrap();
        let b = generate_dataset(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&cfg, 12).unwrap();
        assert_ne!(a.frames[0].images[0], c.frames[0].images[0]);
    }

    #[test]
    fn zero_pedestrians_gives_empty_truth() {
        let cfg = SceneConfig { pedestrians_min: 0, pedestrians_max: 0, ..small_config(2, 0) };
        let ds = generate_dataset(&cfg, 3).unwrap();
        for f in &ds.frames {
            assert!(f.truth.pedestrians.is_empty());
            assert!(f.truth.occupancy.scores.data.iter().all(|&v| v == 0.0));
            assert!(f.truth.annotations.iter().all(|a| a.is_empty()));
            assert!(f.truth.head_maps.iter().all(|m| m.data.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn too_many_pedestrians_is_invalid() {
        let cfg = SceneConfig { pedestrians_min: 1, pedestrians_max: 500, ..small_config(1, 0) };
        assert!(matches!(generate_dataset(&cfg, 0), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn center_pedestrian_visible_everywhere() {
        let cfg = small_config(1, 0);
        let calibs = cfg.build_rig().unwrap();
        let bg = render_background(&cfg, &calibs, 0).unwrap();
        let ped = Pedestrian { id: 0, ground_position: [3.05, 2.95], height: 1.75, width: 0.55, appearance_seed: 5 };
        let state = SceneState { frame_id: 0, pedestrians: vec![ped], clutter: vec![], noise_seed: 1 };
        let frame = render_frame(&cfg, &state, &calibs, &bg).unwrap();
        for (v, calib) in calibs.iter().enumerate() {
            let ann = &frame.truth.annotations[v][0];
            assert!(ann.visible, "view {v}");
            let p = world_to_pixel(calib, &Vector3::new(3.05, 2.95, 0.0)).unwrap();
            assert!((p.x - ann.foot_pixel[0]).hypot(p.y - ann.foot_pixel[1]) <= 1.0);
        }
        // Occupancy mode sits in the pedestrian's cell.
        let occ = &frame.truth.occupancy.scores;
        let (r, c) = cfg.grid.cell_of(&[3.05, 2.95]);
        let argmax = occ.data.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        assert_eq!(argmax, r * occ.cols + c);
    }

    #[test]
    fn rig_has_opposing_halves() {
        let calibs = SceneConfig::default().build_rig().unwrap();
        assert_eq!(calibs.len(), 4);
        assert!(calibs[0].optical_axis().x > 0.0 && calibs[1].optical_axis().x > 0.0);
        assert!(calibs[2].optical_axis().x < 0.0 && calibs[3].optical_axis().x < 0.0);
    }

    fn local_maxima(map: &ScoreMap, thr: f64) -> usize {
        let mut n = 0;
        for r in 0..map.rows {
            for c in 0..map.cols {
                let v = map.get(r, c);
                if v < thr {
                    continue;
                }
                let mut is_max = true;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= map.rows as i64 || cc >= map.cols as i64 {
                            continue;
                        }
                        if map.get(rr as usize, cc as usize) > v {
                            is_max = false;
                        }
                    }
                }
                n += is_max as usize;
            }
        }
        n
    }

    #[test]
    fn occupancy_modes_count_pedestrians() {
        // Separation of 0.75 m = 3 cells.
        let cfg = SceneConfig { min_separation: 0.75, ..small_config(20, 0) };
        let ds = generate_dataset(&cfg, 99).unwrap();
        for f in &ds.frames {
            assert_eq!(local_maxima(&f.truth.occupancy.scores, 0.5), f.truth.pedestrians.len());
        }
    }

    #[test]
    fn truth_feet_match_projection() {
        let ds = generate_dataset(&small_config(10, 0), 5).unwrap();
        for f in &ds.frames {
            for (v, calib) in ds.calibs.iter().enumerate() {
                for (p, ann) in f.truth.pedestrians.iter().zip(&f.truth.annotations[v]) {
                    if !ann.visible {
                        continue;
                    }
                    let g = p.ground_position;
                    let px = world_to_pixel(calib, &Vector3::new(g[0], g[1], 0.0)).unwrap();
                    assert!((px.x - ann.foot_pixel[0]).hypot(px.y - ann.foot_pixel[1]) <= 1.0);
                }
            }
            let maps_ok = f.truth.head_maps.iter().chain(&f.truth.foot_maps).chain([&f.truth.occupancy.scores]);
            for m in maps_ok {
                assert!(m.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn pedestrians_respect_bounds() {
        let cfg = small_config(30, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let peds = sample_pedestrians(&cfg, &mut rng).unwrap();
            assert!((1..=5).contains(&peds.len()));
            for (i, p) in peds.iter().enumerate() {
                assert!((1.5..=2.0).contains(&p.height) && (0.4..=0.7).contains(&p.width));
                assert!(cfg.grid.contains(&p.ground_position));
                for q in &peds[i + 1..] {
                    let d = (p.ground_position[0] - q.ground_position[0]).hypot(p.ground_position[1] - q.ground_position[1]);
                    assert!(d >= 0.6);
                }
            }
        }
    }
}
