//! Painter's-algorithm renderer: textured ground, flat ground clutter, billboard
//! pedestrians, sensor noise.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    splitmix64, GroundTruth, MultiviewFrame, OccupancyMap, Pedestrian, SceneConfig, ScoreMap, ViewAnnotation,
};
use crate::error::{Error, Result};
use crate::geometry::{world_to_pixel, CameraCalibration, PixelRect};
use crate::raster::Image;

const SKY: [f64; 3] = [0.72, 0.80, 0.90];

/// Everything needed to render one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub frame_id: usize,
    pub pedestrians: Vec<Pedestrian>,
    pub clutter: Vec<Blotch>,
    pub noise_seed: u64,
}

/// A flat elliptical stain or shadow lying on the ground.
#[derive(Clone, Debug, PartialEq)]
pub struct Blotch {
    /// Ground position of the center (m).
    pub center: [f64; 2],
    /// Semi-axes (m).
    pub radii: [f64; 2],
    /// Rotation of the first axis from the x axis (rad).
    pub angle: f64,
    pub color: [f64; 3],
}

impl Blotch {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = ((c * dx + s * dy) / self.radii[0], (-s * dx + c * dy) / self.radii[1]);
        u * u + v * v <= 1.0
    }
}

/// Random ground clutter: up to `max` blotches anywhere on the grid, dark or light.
pub fn sample_clutter(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Blotch> {
    let n = rng.random_range(0..=config.clutter_max);
    let [ex, ey] = config.grid.extent_max();
    let [ox, oy] = config.grid.origin;
    (0..n)
        .map(|_| {
            let level: f64 = if rng.random::<bool>() { rng.random_range(0.02..0.3) } else { rng.random_range(0.65..0.95) };
            Blotch {
                center: [rng.random_range(ox..ex), rng.random_range(oy..ey)],
                radii: [rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)],
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: [0; 3].map(|_| (level + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0)),
            }
        })
        .collect()
}

/// Where the ray through the center of pixel `(r, c)` meets the floor, if it does.
fn floor_hit(calib: &CameraCalibration, k_inv: &Matrix3<f64>, r: usize, c: usize) -> Option<Vector3<f64>> {
    let ray = calib.rotation.transpose() * (k_inv * Vector3::new(c as f64 + 0.5, r as f64 + 0.5, 1.0));
    if ray.z >= -1e-9 {
        return None;
    }
    let center = calib.center();
    Some(center + ray * (-center.z / ray.z))
}

fn intrinsic_inverse(calib: &CameraCalibration) -> Result<Matrix3<f64>> {
    calib.intrinsic.try_inverse().ok_or_else(|| Error::InvalidCalibration { view: calib.view_id, reason: "singular intrinsic".into() })
}

struct GroundTexture {
    phases: [f64; 4],
    tint: [f64; 3],
}

impl GroundTexture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6772_6f75_6e64));
        let phases = [0; 4].map(|_| rng.random::<f64>() * std::f64::consts::TAU);
        let tint = [0; 3].map(|_| rng.random_range(-0.03..0.03));
        Self { phases, tint }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let tile = ((x / 0.5).floor() as i64 + (y / 0.5).floor() as i64).rem_euclid(2) as f64;
        let wave = 0.03 * (1.3 * x + self.phases[0]).sin() * (0.9 * y + self.phases[1]).cos()
            + 0.02 * (3.1 * x - 2.3 * y + self.phases[2]).sin()
            + 0.015 * (5.7 * y + self.phases[3]).sin();
        let base = [0.50, 0.47, 0.42];
        [0, 1, 2].map(|c| (base[c] + self.tint[c] + 0.05 * tile + wave).clamp(0.0, 1.0))
    }
}

/// Static background of every view: ground texture where the pixel ray meets the
/// floor, sky elsewhere.
pub fn render_background(config: &SceneConfig, calibs: &[CameraCalibration], seed: u64) -> Result<Vec<Image>> {
    let tex = GroundTexture::new(seed);
    calibs
        .iter()
        .map(|calib| {
            let k_inv = intrinsic_inverse(calib)?;
            let [h, w] = config.image_size;
            Ok(Image::from_fn(h, w, 3, |r, c, ch| match floor_hit(calib, &k_inv, r, c) {
                Some(hit) => tex.color(hit.x, hit.y)[ch],
                None => SKY[ch] - 0.1 * (r as f64 / h as f64),
            }))
        })
        .collect()
}

struct Appearance {
    shirt: [[f64; 3]; 2],
    pants: [f64; 3],
    skin: [f64; 3],
    stripes: f64,
    diagonal: bool,
}

impl Appearance {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut color = |lo: f64, hi: f64| [0; 3].map(|_| rng.random_range(lo..hi));
        let shirt = [color(0.1, 0.95), color(0.1, 0.95)];
        let pants = color(0.05, 0.9);
        let skins = [[0.93, 0.78, 0.65], [0.78, 0.58, 0.42], [0.52, 0.36, 0.25]];
        let skin = skins[rng.random_range(0..skins.len())];
        Self { shirt, pants, skin, stripes: rng.random_range(2..=5) as f64, diagonal: rng.random() }
    }

    /// Color at normalized billboard coordinates (`a` across, `b` down), or `None`
    /// where the billboard is transparent.
    fn shade(&self, a: f64, b: f64) -> Option<[f64; 3]> {
        if b < 0.16 {
            let (ea, eb) = ((a - 0.5) / 0.22, (b - 0.08) / 0.08);
            if ea * ea + eb * eb > 1.0 {
                return None;
            }
            return Some(if b < 0.045 { [0.12, 0.09, 0.07] } else { self.skin });
        }
        if b < 0.55 {
            if !(0.06..=0.94).contains(&a) {
                return None;
            }
            let t = if self.diagonal { (b - 0.16) / 0.39 + 0.5 * a } else { (b - 0.16) / 0.39 };
            let stripe = ((t * self.stripes * 2.0).floor() as i64).rem_euclid(2) as usize;
            return Some(self.shirt[stripe]);
        }
        if (0.12..=0.46).contains(&a) || (0.54..=0.88).contains(&a) {
            return Some(self.pants);
        }
        None
    }
}

struct Billboard {
    body: [f64; 4],
    head: Vector2<f64>,
    foot: Vector2<f64>,
    depth: f64,
}

fn billboard(calib: &CameraCalibration, p: &Pedestrian) -> Option<Billboard> {
    let [x, y] = p.ground_position;
    let foot = world_to_pixel(calib, &Vector3::new(x, y, 0.0)).ok()?;
    let head = world_to_pixel(calib, &Vector3::new(x, y, p.height)).ok()?;
    let mid = Vector3::new(x, y, p.height / 2.0);
    let depth = calib.depth(&mid);
    let half_w = calib.intrinsic[(0, 0)] * p.width / 2.0 / depth;
    let xc = (foot.x + head.x) / 2.0;
    Some(Billboard { body: [xc - half_w, xc + half_w, head.y, foot.y], head, foot, depth })
}

/// Pixel index range whose centers fall inside `[lo, hi)`.
fn covered(lo: f64, hi: f64) -> std::ops::Range<i64> {
    (lo - 0.5).ceil() as i64..(hi - 0.5).ceil() as i64
}

/// Renders one frame: ground clutter over the static background, pedestrians painted
/// far to near, then additive Gaussian sensor noise.
pub fn render_frame(
    config: &SceneConfig,
    state: &SceneState,
    calibs: &[CameraCalibration],
    background: &[Image],
) -> Result<MultiviewFrame> {
    if calibs.len() != background.len() {
        return Err(Error::ShapeMismatch(format!("{} calibrations, {} backgrounds", calibs.len(), background.len())));
    }
    let grid = &config.grid;
    let stride = config.map_stride as f64;
    let (map_rows, map_cols) = config.map_shape();
    let looks: Vec<Appearance> = state.pedestrians.iter().map(|p| Appearance::new(p.appearance_seed)).collect();

    let mut occupancy = ScoreMap::zeros(grid.rows(), grid.cols());
    for p in &state.pedestrians {
        occupancy.splat_max(grid.world_to_grid(&p.ground_position), config.occupancy_sigma_cells);
    }

    let mut images = Vec::with_capacity(calibs.len());
    let mut head_maps = Vec::with_capacity(calibs.len());
    let mut foot_maps = Vec::with_capacity(calibs.len());
    let mut annotations = Vec::with_capacity(calibs.len());

    for (v, calib) in calibs.iter().enumerate() {
        let mut img = background[v].clone();
        if !state.clutter.is_empty() {
            let k_inv = intrinsic_inverse(calib)?;
            for r in 0..img.height {
                for c in 0..img.width {
                    let Some(hit) = floor_hit(calib, &k_inv, r, c) else { continue };
                    if let Some(b) = state.clutter.iter().rev().find(|b| b.contains(hit.x, hit.y)) {
                        for ch in 0..3 {
                            img.set(r, c, ch, b.color[ch]);
                        }
                    }
                }
            }
        }
        let (h, w) = (img.height as i64, img.width as i64);
        let boards: Vec<Option<Billboard>> = state.pedestrians.iter().map(|p| billboard(calib, p)).collect();
        let mut order: Vec<usize> = (0..boards.len()).filter(|&i| boards[i].is_some()).collect();
        order.sort_by(|&a, &b| {
            let (da, db) = (boards[a].as_ref().unwrap().depth, boards[b].as_ref().unwrap().depth);
            db.total_cmp(&da).then(a.cmp(&b))
        });

        let mut owner = vec![usize::MAX; (h * w) as usize];
        let mut drawable = vec![0usize; boards.len()];
        for &i in &order {
            let bb = boards[i].as_ref().unwrap();
            let [x0, x1, y0, y1] = bb.body;
            for r in covered(y0, y1) {
                let b = (r as f64 + 0.5 - y0) / (y1 - y0);
                for c in covered(x0, x1) {
                    let a = (c as f64 + 0.5 - x0) / (x1 - x0);
                    let Some(color) = looks[i].shade(a, b) else { continue };
                    drawable[i] += 1;
                    if r < 0 || c < 0 || r >= h || c >= w {
                        continue;
                    }
                    owner[(r * w + c) as usize] = i;
                    for (ch, val) in color.iter().enumerate() {
                        img.set(r as usize, c as usize, ch, *val);
                    }
                }
            }
        }
        let mut owned = vec![0usize; boards.len()];
        for &o in &owner {
            if o != usize::MAX {
                owned[o] += 1;
            }
        }

        let mut head_map = ScoreMap::zeros(map_rows, map_cols);
        let mut foot_map = ScoreMap::zeros(map_rows, map_cols);
        let sigma_map = config.keypoint_sigma_px / stride;
        let mut view_ann = Vec::with_capacity(boards.len());
        for (i, bb) in boards.iter().enumerate() {
            let Some(bb) = bb else {
                view_ann.push(ViewAnnotation {
                    visible: false,
                    visible_fraction: 0.0,
                    body: [0.0; 4],
                    body_rect: None,
                    head_pixel: [0.0; 2],
                    foot_pixel: [0.0; 2],
                });
                continue;
            };
            let fraction = if drawable[i] == 0 { 0.0 } else { owned[i] as f64 / drawable[i] as f64 };
            let visible = fraction >= config.visibility_threshold;
            let xs = covered(bb.body[0], bb.body[1]);
            let ys = covered(bb.body[2], bb.body[3]);
            let clip = |r: std::ops::Range<i64>, hi: i64| (r.start.clamp(0, hi) as usize, r.end.clamp(0, hi) as usize);
            let ((cx0, cx1), (cy0, cy1)) = (clip(xs, w), clip(ys, h));
            let body_rect = (cx0 < cx1 && cy0 < cy1).then_some(PixelRect { x_min: cx0, x_max: cx1, y_min: cy0, y_max: cy1 });
            if visible {
                head_map.splat_max([bb.head.x / stride - 0.5, bb.head.y / stride - 0.5], sigma_map);
                foot_map.splat_max([bb.foot.x / stride - 0.5, bb.foot.y / stride - 0.5], sigma_map);
            }
            view_ann.push(ViewAnnotation {
                visible,
                visible_fraction: fraction,
                body: bb.body,
                body_rect,
                head_pixel: [bb.head.x, bb.head.y],
                foot_pixel: [bb.foot.x, bb.foot.y],
            });
        }

        if config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, config.noise_sigma).expect("valid sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(state.noise_seed ^ splitmix64(v as u64)));
            for px in img.data.iter_mut() {
                *px = (*px + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        images.push(img);
        head_maps.push(head_map);
        foot_maps.push(foot_map);
        annotations.push(view_ann);
    }

    Ok(MultiviewFrame {
        frame_id: state.frame_id,
        images,
        truth: GroundTruth {
            pedestrians: state.pedestrians.clone(),
            occupancy: OccupancyMap { grid: grid.clone(), scores: occupancy },
            head_maps,
            foot_maps,
            annotations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SceneConfig, Vec<CameraCalibration>, Vec<Image>) {
        let cfg = SceneConfig { train_frames: 1, test_frames: 0, ..SceneConfig::default() };
        let calibs = cfg.build_rig().unwrap();
        let bg = render_background(&cfg, &calibs, 4).unwrap();
        (cfg, calibs, bg)
    }

    fn ped(id: usize, x: f64, y: f64) -> Pedestrian {
        Pedestrian { id, ground_position: [x, y], height: 1.8, width: 0.6, appearance_seed: 17 + id as u64 }
    }

    #[test]
    fn empty_scene_is_background_plus_noise() {
        let (cfg, calibs, bg) = setup();
        let state = SceneState { frame_id: 0, pedestrians: vec![], clutter: vec![], noise_seed: 9 };
        let frame = render_frame(&cfg, &state, &calibs, &bg).unwrap();
        for (img, b) in frame.images.iter().zip(&bg) {
            let max_dev = img.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let mean_dev = img.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / img.data.len() as f64;
            assert!(max_dev < 0.1 && mean_dev > 0.001 && mean_dev < 0.02, "{max_dev} {mean_dev}");
        }
        let clean = SceneConfig { noise_sigma: 0.0, ..cfg };
        let frame = render_frame(&clean, &state, &calibs, &bg).unwrap();
        assert_eq!(frame.images, bg);
    }

    #[test]
    fn collinear_pedestrians_occlude_in_one_view_only() {
        let (cfg, calibs, bg) = setup();
        // Put a second pedestrian right behind the first along view 0's ray through it.
        let cam = calibs[0].center();
        let near = [2.0, 2.6];
        let dir = Vector2::new(near[0] - cam.x, near[1] - cam.y).normalize();
        let far = [near[0] + dir.x * 1.2, near[1] + dir.y * 1.2];
        let state = SceneState { frame_id: 0, pedestrians: vec![ped(0, near[0], near[1]), ped(1, far[0], far[1])], clutter: vec![], noise_seed: 1 };
        let frame = render_frame(&cfg, &state, &calibs, &bg).unwrap();
        let ann = &frame.truth.annotations;
        assert!(ann[0][0].visible);
        assert!((ann[0][0].visible_fraction - 1.0).abs() < 1e-12);
        assert!(!ann[0][1].visible, "fraction {}", ann[0][1].visible_fraction);
        // Seen from the opposite side of the courtyard both are visible.
        let side = (2..4).find(|&v| ann[v][1].visible && ann[v][0].visible);
        assert!(side.is_some());
    }

    #[test]
    fn head_above_foot_and_maps_peak_near_keypoints() {
        let (cfg, calibs, bg) = setup();
        let state = SceneState { frame_id: 0, pedestrians: vec![ped(0, 3.0, 3.0)], clutter: vec![], noise_seed: 1 };
        let frame = render_frame(&cfg, &state, &calibs, &bg).unwrap();
        for v in 0..calibs.len() {
            let a = &frame.truth.annotations[v][0];
            assert!(a.head_pixel[1] < a.foot_pixel[1] - 15.0);
            let m = &frame.truth.foot_maps[v];
            assert!(m.max_value() > 0.5);
        }
    }
}
