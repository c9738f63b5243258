//! Camera models, ground-plane homographies, cross-view patch placement transfer and
//! differentiable region warping.
//!
//! Conventions: world frame has `z` up and the ground at `z = 0`. A calibration maps a
//! world point `X` to camera coordinates `R X + t`; depth is the camera `z` component.
//! Pixel coordinates are continuous with pixel centers at half-integers (see [`crate::raster`]).

use log::warn;
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{taps, Image};

const MIN_DEPTH: f64 = 1e-9;
const MIN_HOMOGRAPHY_DET: f64 = 1e-12;
const MIN_TRANSFER_AREA: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalibration {
    pub view_id: usize,
    pub intrinsic: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
}

/// On-disk form of a calibration: row-major matrices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub view_id: usize,
    pub intrinsic: [f64; 9],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub image_size: [usize; 2],
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

impl From<&CameraCalibration> for CalibrationRecord {
    fn from(c: &CameraCalibration) -> Self {
        Self {
            view_id: c.view_id,
            intrinsic: row_major(&c.intrinsic),
            rotation: row_major(&c.rotation),
            translation: [c.translation.x, c.translation.y, c.translation.z],
            image_size: [c.image_size.0, c.image_size.1],
        }
    }
}

impl TryFrom<CalibrationRecord> for CameraCalibration {
    type Error = Error;

    fn try_from(r: CalibrationRecord) -> Result<Self> {
        let calib = CameraCalibration {
            view_id: r.view_id,
            intrinsic: Matrix3::from_row_slice(&r.intrinsic),
            rotation: Matrix3::from_row_slice(&r.rotation),
            translation: Vector3::from_column_slice(&r.translation),
            image_size: (r.image_size[0], r.image_size[1]),
        };
        calib.validate()?;
        Ok(calib)
    }
}

impl Serialize for CameraCalibration {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CalibrationRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraCalibration {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = CalibrationRecord::deserialize(d)?;
        CameraCalibration::try_from(rec).map_err(serde::de::Error::custom)
    }
}

impl CameraCalibration {
    /// Pinhole camera centered at `center` whose optical axis passes through `target`,
    /// with image rows pointing "down" (towards world `-z` for a level camera).
    pub fn look_at(
        view_id: usize,
        focal: f64,
        image_size: (usize, usize),
        center: Vector3<f64>,
        target: Vector3<f64>,
    ) -> Result<Self> {
        let z = (target - center).normalize();
        let up = Vector3::z();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidCalibration {
                view: view_id,
                reason: "optical axis is vertical; use an explicit rotation".into(),
            });
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        let (h, w) = image_size;
        let intrinsic = Matrix3::new(focal, 0.0, w as f64 / 2.0, 0.0, focal, h as f64 / 2.0, 0.0, 0.0, 1.0);
        let calib = Self { view_id, intrinsic, rotation, translation, image_size };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidCalibration { view: self.view_id, reason };
        let rtr = self.rotation.transpose() * self.rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(bad("rotation is not orthonormal".into()));
        }
        let k = &self.intrinsic;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(bad("focal entries must be positive".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(bad("intrinsic must be upper triangular with K[2][2] = 1".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(bad("empty image size".into()));
        }
        ground_homography(self).map(|_| ())
    }

    pub fn height(&self) -> usize {
        self.image_size.0
    }

    pub fn width(&self) -> usize {
        self.image_size.1
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis direction in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, world: &Vector3<f64>) -> f64 {
        (self.rotation * world + self.translation).z
    }

    pub fn contains_pixel(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width() as f64 && p.y < self.height() as f64
    }
}

/// Perspective projection `K (R X + t)` normalized by depth.
pub fn world_to_pixel(calib: &CameraCalibration, world: &Vector3<f64>) -> Result<Vector2<f64>> {
    let cam = calib.rotation * world + calib.translation;
    if cam.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(cam.z));
    }
    let p = calib.intrinsic * cam;
    Ok(Vector2::new(p.x / p.z, p.y / p.z))
}

/// Homography taking homogeneous ground coordinates `(x, y, 1)` on `z = 0` to pixels:
/// `K [r1 r2 t]`.
pub fn ground_homography(calib: &CameraCalibration) -> Result<Matrix3<f64>> {
    let mut rt = Matrix3::zeros();
    rt.set_column(0, &calib.rotation.column(0));
    rt.set_column(1, &calib.rotation.column(1));
    rt.set_column(2, &calib.translation);
    let h = calib.intrinsic * rt;
    let det = h.determinant();
    if !det.is_finite() || det.abs() <= MIN_HOMOGRAPHY_DET {
        return Err(Error::SingularHomography(det));
    }
    Ok(h)
}

/// Applies a homography to a 2D point and dehomogenizes.
pub fn apply_homography(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Jacobian of the projective map `p -> dehom(H p)` at `p`.
pub fn homography_jacobian(h: &Matrix3<f64>, p: &Vector2<f64>) -> Matrix2<f64> {
    let a = h[(0, 0)] * p.x + h[(0, 1)] * p.y + h[(0, 2)];
    let b = h[(1, 0)] * p.x + h[(1, 1)] * p.y + h[(1, 2)];
    let c = h[(2, 0)] * p.x + h[(2, 1)] * p.y + h[(2, 2)];
    let c2 = c * c;
    Matrix2::new(
        (h[(0, 0)] * c - a * h[(2, 0)]) / c2,
        (h[(0, 1)] * c - a * h[(2, 1)]) / c2,
        (h[(1, 0)] * c - b * h[(2, 0)]) / c2,
        (h[(1, 1)] * c - b * h[(2, 1)]) / c2,
    )
}

/// Projects a ground point, requiring it to land inside the image.
pub fn ground_to_visible_pixel(calib: &CameraCalibration, ground: &Vector2<f64>) -> Option<Vector2<f64>> {
    let p = world_to_pixel(calib, &Vector3::new(ground.x, ground.y, 0.0)).ok()?;
    calib.contains_pixel(&p).then_some(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundGrid {
    /// World coordinates (meters) of the grid's low corner.
    pub origin: [f64; 2],
    pub cell_size: f64,
    /// (rows along y, cols along x).
    pub shape: (usize, usize),
}

impl GroundGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) {
            return Err(Error::ConfigInvalid("grid.cell_size must be positive".into()));
        }
        if self.shape.0 < 8 || self.shape.1 < 8 {
            return Err(Error::ConfigInvalid("grid.shape components must be >= 8".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    pub fn num_cells(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    /// World extents `(x_max, y_max)`.
    pub fn extent_max(&self) -> [f64; 2] {
        [
            self.origin[0] + self.cell_size * self.shape.1 as f64,
            self.origin[1] + self.cell_size * self.shape.0 as f64,
        ]
    }

    pub fn contains(&self, world: &[f64; 2]) -> bool {
        let m = self.extent_max();
        world[0] >= self.origin[0] && world[1] >= self.origin[1] && world[0] <= m[0] && world[1] <= m[1]
    }

    /// Continuous grid coordinates `(col, row)` where integer values are cell centers.
    pub fn world_to_grid(&self, world: &[f64; 2]) -> [f64; 2] {
        [
            (world[0] - self.origin[0]) / self.cell_size - 0.5,
            (world[1] - self.origin[1]) / self.cell_size - 0.5,
        ]
    }

    pub fn grid_to_world(&self, grid: &[f64; 2]) -> [f64; 2] {
        [
            self.origin[0] + (grid[0] + 0.5) * self.cell_size,
            self.origin[1] + (grid[1] + 0.5) * self.cell_size,
        ]
    }

    /// `(row, col)` of the cell containing the point, clamped to the grid.
    pub fn cell_of(&self, world: &[f64; 2]) -> (usize, usize) {
        let g = self.world_to_grid(world);
        let col = (g[0] + 0.5).floor().clamp(0.0, (self.cols() - 1) as f64) as usize;
        let row = (g[1] + 0.5).floor().clamp(0.0, (self.rows() - 1) as f64) as usize;
        (row, col)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        self.grid_to_world(&[col as f64, row as f64])
    }
}

/// Axis-aligned pixel rectangle with half-open extents `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x_min: usize,
    pub x_max: usize,
    pub y_min: usize,
    pub y_max: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && self.x_max <= width && self.y_max <= height
    }

    fn as_array(&self) -> [usize; 4] {
        [self.x_min, self.x_max, self.y_min, self.y_max]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlacement {
    pub view_id: usize,
    pub instance_id: usize,
    pub rect: PixelRect,
}

/// Transfers a placement from one view to another through the ground plane.
///
/// Corners are expressed relative to the anchor's source pixel, pushed through the
/// Jacobian of `H_dst H_src^-1` at that pixel and re-attached at the anchor's
/// destination pixel. The bounding rectangle of the mapped corners, clipped to the
/// destination image, is returned; `None` when less than 4 px^2 survives.
pub fn transfer_placement(
    src: &PatchPlacement,
    src_calib: &CameraCalibration,
    dst_calib: &CameraCalibration,
    anchor_ground: &Vector2<f64>,
) -> Result<Option<PatchPlacement>> {
    let a_src = ground_to_visible_pixel(src_calib, anchor_ground).ok_or(Error::AnchorNotVisible(src_calib.view_id))?;
    let a_dst = ground_to_visible_pixel(dst_calib, anchor_ground).ok_or(Error::AnchorNotVisible(dst_calib.view_id))?;
    let h_src = ground_homography(src_calib)?;
    let h_dst = ground_homography(dst_calib)?;
    let h_src_inv = h_src.try_inverse().ok_or(Error::SingularHomography(h_src.determinant()))?;
    let jac = homography_jacobian(&(h_dst * h_src_inv), &a_src);

    let r = &src.rect;
    let corners = [
        (r.x_min as f64, r.y_min as f64),
        (r.x_max as f64, r.y_min as f64),
        (r.x_min as f64, r.y_max as f64),
        (r.x_max as f64, r.y_max as f64),
    ];
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (x, y) in corners {
        let m = a_dst + jac * (Vector2::new(x, y) - a_src);
        lo_x = lo_x.min(m.x);
        lo_y = lo_y.min(m.y);
        hi_x = hi_x.max(m.x);
        hi_y = hi_y.max(m.y);
    }
    let (w, h) = (dst_calib.width() as f64, dst_calib.height() as f64);
    let clip = |v: f64, hi: f64| v.round().clamp(0.0, hi) as usize;
    let rect = PixelRect { x_min: clip(lo_x, w), x_max: clip(hi_x, w), y_min: clip(lo_y, h), y_max: clip(hi_y, h) };
    if rect.x_max <= rect.x_min || rect.y_max <= rect.y_min || rect.area() < MIN_TRANSFER_AREA {
        return Ok(None);
    }
    Ok(Some(PatchPlacement { view_id: dst_calib.view_id, instance_id: src.instance_id, rect }))
}

/// A set of cameras sharing a facing direction: one source, the rest destinations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSet {
    pub source: usize,
    pub destinations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSplit {
    pub sets: Vec<ViewSet>,
    /// True when the rig had no usable facing split and views were split by index parity.
    pub parity_fallback: bool,
}

impl ViewSplit {
    /// The set containing `view_id`, if any.
    pub fn set_of(&self, view_id: usize) -> Option<&ViewSet> {
        self.sets.iter().find(|s| s.source == view_id || s.destinations.contains(&view_id))
    }
}

fn make_set(mut ids: Vec<usize>) -> ViewSet {
    ids.sort_unstable();
    let source = ids.remove(0);
    ViewSet { source, destinations: ids }
}

/// Splits the rig into two groups of cameras facing each other, by the sign of the
/// horizontal optical-axis component (x first, y if x does not separate them). The
/// lowest view id of each group is its source camera.
pub fn split_views(calibs: &[CameraCalibration]) -> Result<ViewSplit> {
    if calibs.len() < 2 {
        return Err(Error::DegenerateRig(format!("need at least 2 views, got {}", calibs.len())));
    }
    let axes: Vec<Vector3<f64>> = calibs.iter().map(|c| c.optical_axis()).collect();
    let all_parallel = axes.iter().all(|a| (a - axes[0]).norm() < 1e-6);

    if !all_parallel {
        for component in [0usize, 1] {
            let (pos, neg): (Vec<_>, Vec<_>) = calibs.iter().zip(&axes).partition(|(_, a)| a[component] >= 0.0);
            if !pos.is_empty() && !neg.is_empty() {
                let ids = |v: Vec<(&CameraCalibration, &Vector3<f64>)>| v.iter().map(|(c, _)| c.view_id).collect();
                let sets = vec![make_set(ids(pos)), make_set(ids(neg))];
                return Ok(ViewSplit { sets, parity_fallback: false });
            }
        }
    }

    warn!("camera rig has no opposing view groups; splitting views by index parity");
    let mut even = Vec::new();
    let mut odd = Vec::new();
    for (i, c) in calibs.iter().enumerate() {
        if i % 2 == 0 { even.push(c.view_id) } else { odd.push(c.view_id) }
    }
    Ok(ViewSplit { sets: vec![make_set(even), make_set(odd)], parity_fallback: true })
}

fn check_rect(image: &Image, rect: &PixelRect) -> Result<()> {
    if !rect.fits(image.height, image.width) {
        return Err(Error::RectOutOfBounds { rect: rect.as_array(), height: image.height, width: image.width });
    }
    Ok(())
}

/// Resamples `patch` bilinearly onto `placement.rect` and overwrites those pixels.
pub fn warp_region(image: &Image, patch: &Image, placement: &PatchPlacement) -> Result<Image> {
    let mut out = image.clone();
    warp_region_in_place(&mut out, patch, placement)?;
    Ok(out)
}

pub fn warp_region_in_place(image: &mut Image, patch: &Image, placement: &PatchPlacement) -> Result<()> {
    let rect = &placement.rect;
    check_rect(image, rect)?;
    if patch.channels != image.channels {
        return Err(Error::ShapeMismatch(format!(
            "patch has {} channels, image has {}",
            patch.channels, image.channels
        )));
    }
    let (rh, rw) = (rect.height(), rect.width());
    for r in 0..rh {
        let ty = taps(r, rh, patch.height);
        for c in 0..rw {
            let tx = taps(c, rw, patch.width);
            for ch in 0..image.channels {
                let v = ty.w0 * (tx.w0 * patch.get(ty.i0, tx.i0, ch) + tx.w1 * patch.get(ty.i0, tx.i1, ch))
                    + ty.w1 * (tx.w0 * patch.get(ty.i1, tx.i0, ch) + tx.w1 * patch.get(ty.i1, tx.i1, ch));
                image.set(rect.y_min + r, rect.x_min + c, ch, v);
            }
        }
    }
    Ok(())
}

/// Derivative of [`warp_region`] with respect to the patch: accumulates the bilinear
/// weights times `grad_image` over the rect into a patch-shaped gradient.
pub fn warp_region_vjp(grad_image: &Image, patch_size: (usize, usize), placement: &PatchPlacement) -> Result<Image> {
    let rect = &placement.rect;
    check_rect(grad_image, rect)?;
    let (ph, pw) = patch_size;
    let mut g = Image::new(ph, pw, grad_image.channels);
    let (rh, rw) = (rect.height(), rect.width());
    for r in 0..rh {
        let ty = taps(r, rh, ph);
        for c in 0..rw {
            let tx = taps(c, rw, pw);
            for ch in 0..grad_image.channels {
                let go = grad_image.get(rect.y_min + r, rect.x_min + c, ch);
                let mut add = |y: usize, x: usize, w: f64| {
                    let i = g.idx(y, x, ch);
                    g.data[i] += w * go;
                };
                add(ty.i0, tx.i0, ty.w0 * tx.w0);
                add(ty.i0, tx.i1, ty.w0 * tx.w1);
                add(ty.i1, tx.i0, ty.w1 * tx.w0);
                add(ty.i1, tx.i1, ty.w1 * tx.w1);
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn overhead(view_id: usize, focal: f64, cx: f64, cy: f64, height: f64, size: (usize, usize)) -> CameraCalibration {
        // Camera z axis points down, image y axis along world -y.
        let rotation = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let center = Vector3::new(cx, cy, height);
        CameraCalibration {
            view_id,
            intrinsic: Matrix3::new(focal, 0.0, size.1 as f64 / 2.0, 0.0, focal, size.0 as f64 / 2.0, 0.0, 0.0, 1.0),
            rotation,
            translation: -(rotation * center),
            image_size: size,
        }
    }

    fn down_looking_identity() -> CameraCalibration {
        CameraCalibration {
            view_id: 0,
            intrinsic: Matrix3::identity(),
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
            translation: Vector3::zeros(),
            image_size: (10, 10),
        }
    }

    #[test]
    fn projection_identity_hits_principal_point() {
        let c = down_looking_identity();
        let p = world_to_pixel(&c, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert!(p.norm() < 1e-15);
    }

    #[test]
    fn projection_offset_is_focal_times_ratio() {
        let mut c = down_looking_identity();
        c.intrinsic[(0, 0)] = 100.0;
        c.intrinsic[(1, 1)] = 100.0;
        let p0 = world_to_pixel(&c, &Vector3::new(0.0, 0.0, -2.0)).unwrap();
        let p1 = world_to_pixel(&c, &Vector3::new(1.0, 0.0, -2.0)).unwrap();
        assert_eq!(p1.x - p0.x, 50.0);
        assert_eq!(p1.y, p0.y);
    }

    #[test]
    fn projection_behind_camera_fails() {
        let c = down_looking_identity();
        assert!(matches!(world_to_pixel(&c, &Vector3::new(0.0, 0.0, 1.0)), Err(Error::NonPositiveDepth(_))));
    }

    #[test]
    fn overhead_homography_is_similarity() {
        let (f, cx, cy, h) = (80.0, 1.5, -2.0, 4.0);
        let c = overhead(0, f, cx, cy, h, (64, 96));
        let hm = ground_homography(&c).unwrap();
        // K [r1 r2 t] with r1 = (1,0,0), r2 = (0,-1,0), t = (-cx, cy, h):
        let (u0, v0) = (48.0, 32.0);
        let expected = Matrix3::new(f, 0.0, -f * cx + u0 * h, 0.0, -f, f * cy + v0 * h, 0.0, 0.0, h);
        assert!((hm - expected).abs().max() < 1e-12);
        assert_eq!(hm[(2, 0)], 0.0);
        assert_eq!(hm[(2, 1)], 0.0);
    }

    #[test]
    fn homography_inverse_identity() {
        let c = CameraCalibration::look_at(0, 110.0, (96, 96), Vector3::new(-2.0, 1.5, 3.0), Vector3::new(3.0, 3.0, 0.8)).unwrap();
        let h = ground_homography(&c).unwrap();
        let prod = h.try_inverse().unwrap() * h;
        assert!((prod - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn singular_homography_detected() {
        // Camera center on the ground plane: [r1 r2 t] loses rank.
        let c = CameraCalibration {
            view_id: 3,
            intrinsic: Matrix3::identity(),
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
            translation: Vector3::zeros(),
            image_size: (10, 10),
        };
        assert!(matches!(ground_homography(&c), Err(Error::SingularHomography(_))));
        assert!(c.validate().is_err());
    }

    #[test]
    fn transfer_to_same_camera_is_identity() {
        let c = CameraCalibration::look_at(0, 110.0, (96, 96), Vector3::new(-2.0, 1.5, 3.0), Vector3::new(3.0, 3.0, 0.8)).unwrap();
        let anchor = Vector2::new(3.0, 3.0);
        let pix = ground_to_visible_pixel(&c, &anchor).unwrap();
        let rect = PixelRect {
            x_min: pix.x as usize - 3,
            x_max: pix.x as usize + 3,
            y_min: pix.y as usize - 20,
            y_max: pix.y as usize - 14,
        };
        let src = PatchPlacement { view_id: 0, instance_id: 7, rect };
        let out = transfer_placement(&src, &c, &c, &anchor).unwrap().unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn transfer_between_translated_overhead_cameras_translates_rect() {
        let a = overhead(0, 50.0, 0.0, 0.0, 5.0, (100, 100));
        // Shift by (0.4 m, -0.2 m): image shift is f/h * (-0.4, -0.2) = (-4, -2) px.
        let b = overhead(1, 50.0, 0.4, -0.2, 5.0, (100, 100));
        let rect = PixelRect { x_min: 40, x_max: 50, y_min: 30, y_max: 44 };
        let src = PatchPlacement { view_id: 0, instance_id: 0, rect };
        let out = transfer_placement(&src, &a, &b, &Vector2::new(0.1, 0.2)).unwrap().unwrap();
        assert_eq!(out.rect, PixelRect { x_min: 36, x_max: 46, y_min: 28, y_max: 42 });
        assert_eq!(out.view_id, 1);
    }

    #[test]
    fn transfer_anchor_outside_fails() {
        let a = overhead(0, 50.0, 0.0, 0.0, 5.0, (100, 100));
        let b = overhead(1, 50.0, 0.4, -0.2, 5.0, (100, 100));
        let src = PatchPlacement { view_id: 0, instance_id: 0, rect: PixelRect { x_min: 1, x_max: 5, y_min: 1, y_max: 5 } };
        assert!(matches!(
            transfer_placement(&src, &a, &b, &Vector2::new(50.0, 0.0)),
            Err(Error::AnchorNotVisible(0))
        ));
    }

    #[test]
    fn transfer_drops_tiny_results() {
        let a = overhead(0, 50.0, 0.0, 0.0, 5.0, (100, 100));
        let b = overhead(1, 10.0, 0.0, 0.0, 5.0, (100, 100));
        let src = PatchPlacement { view_id: 0, instance_id: 0, rect: PixelRect { x_min: 48, x_max: 52, y_min: 48, y_max: 52 } };
        assert_eq!(transfer_placement(&src, &a, &b, &Vector2::new(0.0, 0.0)).unwrap(), None);
    }

    fn facing(view_id: usize, x: f64, y: f64, look_x: f64) -> CameraCalibration {
        CameraCalibration::look_at(view_id, 100.0, (96, 96), Vector3::new(x, y, 3.0), Vector3::new(look_x, y + 0.3 * view_id as f64, 0.0))
            .unwrap()
    }

    #[test]
    fn split_two_opposing_cameras() {
        let calibs = vec![facing(0, -2.0, 0.0, 3.0), facing(1, 8.0, 0.0, 3.0)];
        let s = split_views(&calibs).unwrap();
        assert!(!s.parity_fallback);
        assert_eq!(s.sets, vec![ViewSet { source: 0, destinations: vec![] }, ViewSet { source: 1, destinations: vec![] }]);
    }

    #[test]
    fn split_seven_cameras_four_three() {
        let mut calibs = Vec::new();
        for id in 0..7 {
            if [0, 2, 3, 6].contains(&id) {
                calibs.push(facing(id, -2.0, id as f64, 3.0));
            } else {
                calibs.push(facing(id, 8.0, id as f64, 3.0));
            }
        }
        let s = split_views(&calibs).unwrap();
        assert_eq!(s.sets[0], ViewSet { source: 0, destinations: vec![2, 3, 6] });
        assert_eq!(s.sets[1], ViewSet { source: 1, destinations: vec![4, 5] });
    }

    #[test]
    fn split_single_view_is_degenerate() {
        assert!(matches!(split_views(&[facing(0, -2.0, 0.0, 3.0)]), Err(Error::DegenerateRig(_))));
    }

    #[test]
    fn split_parallel_axes_falls_back_to_parity() {
        let calibs: Vec<_> = (0..4).map(|i| overhead(i, 50.0, i as f64, 0.0, 5.0, (64, 64))).collect();
        let s = split_views(&calibs).unwrap();
        assert!(s.parity_fallback);
        assert_eq!(s.sets[0], ViewSet { source: 0, destinations: vec![2] });
        assert_eq!(s.sets[1], ViewSet { source: 1, destinations: vec![3] });
    }

    #[test]
    fn warp_same_size_copies() {
        let img = Image::filled(10, 10, 3, 0.1);
        let patch = Image::from_fn(4, 5, 3, |r, c, ch| (r * 5 + c) as f64 / 20.0 + ch as f64 * 0.01);
        let pl = PatchPlacement { view_id: 0, instance_id: 0, rect: PixelRect { x_min: 2, x_max: 7, y_min: 3, y_max: 7 } };
        let out = warp_region(&img, &patch, &pl).unwrap();
        for r in 0..10 {
            for c in 0..10 {
                for ch in 0..3 {
                    let inside = (3..7).contains(&r) && (2..7).contains(&c);
                    let expect = if inside { patch.get(r - 3, c - 2, ch) } else { 0.1 };
                    assert_eq!(out.get(r, c, ch), expect);
                }
            }
        }
        assert_eq!(img.get(4, 4, 0), 0.1);
    }

    #[test]
    fn warp_constant_patch_any_size() {
        let img = Image::new(20, 20, 3);
        let patch = Image::filled(3, 3, 3, 0.37);
        let pl = PatchPlacement { view_id: 0, instance_id: 0, rect: PixelRect { x_min: 1, x_max: 18, y_min: 5, y_max: 11 } };
        let out = warp_region(&img, &patch, &pl).unwrap();
        for r in 5..11 {
            for c in 1..18 {
                assert!((out.get(r, c, 1) - 0.37).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn warp_upscale_2x2_to_4x4_matches_hand_weights() {
        // Source taps along each axis for outputs 0..4: s = (i + 0.5)/2 - 0.5, clamped:
        // 0 -> 0, 1 -> 0.25, 2 -> 0.75, 3 -> 1.
        let patch = Image::from_fn(2, 2, 1, |r, c, _| [[0.0, 1.0], [2.0, 3.0]][r][c]);
        let pl = PatchPlacement { view_id: 0, instance_id: 0, rect: PixelRect { x_min: 0, x_max: 4, y_min: 0, y_max: 4 } };
        let out = warp_region(&Image::new(4, 4, 1), &patch, &pl).unwrap();
        let axis = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                let (wy, wx) = (axis[r], axis[c]);
                let expect = (1.0 - wy) * ((1.0 - wx) * 0.0 + wx * 1.0) + wy * ((1.0 - wx) * 2.0 + wx * 3.0);
                assert!((out.get(r, c, 0) - expect).abs() < 1e-15, "({r},{c})");
            }
        }
        // Interior value (1,1): 0.75*0.75*0 + 0.75*0.25*1 + 0.25*0.75*2 + 0.25*0.25*3 = 0.75.
        assert!((out.get(1, 1, 0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn warp_out_of_bounds_rect() {
        let pl = PatchPlacement { view_id: 0, instance_id: 0, rect: PixelRect { x_min: 5, x_max: 11, y_min: 0, y_max: 2 } };
        assert!(matches!(
            warp_region(&Image::new(10, 10, 3), &Image::new(2, 2, 3), &pl),
            Err(Error::RectOutOfBounds { .. })
        ));
    }

    #[test]
    fn warp_vjp_matches_finite_differences() {
        let patch = Image::from_fn(8, 8, 3, |r, c, ch| ((r * 13 + c * 7 + ch * 3) % 11) as f64 / 11.0);
        let base = Image::from_fn(24, 24, 3, |r, c, ch| ((r + 2 * c + ch) % 5) as f64 / 5.0);
        let pl = PatchPlacement { view_id: 0, instance_id: 0, rect: PixelRect { x_min: 3, x_max: 16, y_min: 4, y_max: 21 } };
        // Scalar functional: weighted sum of the output.
        let weights = Image::from_fn(24, 24, 3, |r, c, ch| ((r * 7 + c * 3 + ch) % 9) as f64 - 4.0);
        let f = |p: &Image| {
            let out = warp_region(&base, p, &pl).unwrap();
            out.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let analytic = warp_region_vjp(&weights, (8, 8), &pl).unwrap();
        let step = 1e-4;
        let mut max_err = 0.0_f64;
        for i in 0..patch.data.len() {
            let mut plus = patch.clone();
            plus.data[i] += step;
            let mut minus = patch.clone();
            minus.data[i] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            max_err = max_err.max((fd - analytic.data[i]).abs());
        }
        assert!(max_err <= 1e-5, "max abs error {max_err}");
    }

    /// Overhead pairs whose pixel scales differ by less than 3x. Integer rect rounding in
    /// the middle view is magnified by that ratio on the way back.
    fn random_rig_pair() -> impl Strategy<Value = (CameraCalibration, CameraCalibration, [f64; 2])> {
        (
            50.0..80.0f64,
            -1.0..1.0f64,
            -1.0..1.0f64,
            4.0..6.0f64,
            50.0..80.0f64,
            -1.0..1.0f64,
            -1.0..1.0f64,
            4.0..6.0f64,
            -0.3..0.3f64,
            -0.3..0.3f64,
        )
            .prop_map(|(f1, x1, y1, h1, f2, x2, y2, h2, ax, ay)| {
                (overhead(0, f1, x1, y1, h1, (120, 120)), overhead(1, f2, x2, y2, h2, (120, 120)), [ax, ay])
            })
    }

    proptest! {
        #[test]
        fn homography_matches_projection(
            eye_x in -6.0..-1.0f64, eye_y in 0.0..6.0f64, eye_z in 2.0..5.0f64,
            focal in 60.0..200.0f64,
            pts in proptest::collection::vec((0.0..6.0f64, 0.0..6.0f64), 100),
        ) {
            let c = CameraCalibration::look_at(0, focal, (96, 128), Vector3::new(eye_x, eye_y, eye_z), Vector3::new(3.0, 3.0, 0.0)).unwrap();
            let h = ground_homography(&c).unwrap();
            for (x, y) in pts {
                let a = apply_homography(&h, &Vector2::new(x, y));
                let b = world_to_pixel(&c, &Vector3::new(x, y, 0.0)).unwrap();
                let scale = b.norm().max(1.0);
                prop_assert!((a - b).norm() <= 1e-9 * scale);
            }
        }

        #[test]
        fn transfer_round_trip_within_one_pixel((a, b, anchor) in random_rig_pair(), w in 3usize..12, h in 3usize..12, dx in -8i64..8, dy in -12i64..4) {
            let anchor = Vector2::new(anchor[0], anchor[1]);
            let pa = ground_to_visible_pixel(&a, &anchor).unwrap();
            let x0 = (pa.x as i64 + dx - w as i64 / 2).max(0) as usize;
            let y0 = (pa.y as i64 + dy).max(0) as usize;
            let rect = PixelRect { x_min: x0, x_max: x0 + w, y_min: y0, y_max: y0 + h };
            let src = PatchPlacement { view_id: 0, instance_id: 1, rect };
            // Rects that shrink below the minimum area are dropped rather than transferred.
            let mid = transfer_placement(&src, &a, &b, &anchor).unwrap();
            prop_assume!(mid.is_some());
            let mid = mid.unwrap();
            // Skip rigs where clipping at the destination border loses part of the rect.
            let mapped_inside = mid.rect.x_min > 0 && mid.rect.y_min > 0 && mid.rect.x_max < 120 && mid.rect.y_max < 120;
            prop_assume!(mapped_inside);
            let back = transfer_placement(&mid, &b, &a, &anchor).unwrap().unwrap();
            for (p, q) in [(back.rect.x_min, rect.x_min), (back.rect.x_max, rect.x_max), (back.rect.y_min, rect.y_min), (back.rect.y_max, rect.y_max)] {
                prop_assert!((p as i64 - q as i64).abs() <= 1, "{:?} vs {:?}", back.rect, rect);
            }
        }

        #[test]
        fn split_is_partition(n in 2usize..9, signs in proptest::collection::vec(any::<bool>(), 9)) {
            let calibs: Vec<_> = (0..n)
                .map(|i| if signs[i] { facing(i, -2.0, i as f64, 3.0) } else { facing(i, 8.0, i as f64, 3.0) })
                .collect();
            let split = split_views(&calibs).unwrap();
            let mut seen = vec![0; n];
            for set in &split.sets {
                seen[set.source] += 1;
                for d in &set.destinations { seen[*d] += 1; }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            prop_assert_eq!(split.sets.len(), 2);
        }
    }
}
