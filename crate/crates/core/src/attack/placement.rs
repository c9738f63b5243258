use nalgebra::{Vector2, Vector3};

use super::PlacementMode;
use crate::error::{Error, Result};
use crate::geometry::{split_views, transfer_placement, world_to_pixel, CameraCalibration, GroundGrid, PatchPlacement, PixelRect, ViewSplit};
use crate::raster::{resize_bilinear, Image};
use crate::scene::{GroundTruth, ViewAnnotation};

/// Square torso rect `fraction` of the body width wide, centered horizontally on the
/// body and vertically at 35% of the body height from the top. `None` when less than
/// 2x2 px remain inside the image.
pub fn torso_rect(ann: &ViewAnnotation, fraction: f64, height: usize, width: usize) -> Option<PixelRect> {
    let [x0, x1, y0, y1] = ann.body;
    let side = (fraction * (x1 - x0)).max(2.0);
    let (cx, cy) = ((x0 + x1) / 2.0, y0 + 0.35 * (y1 - y0));
    let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let rect = PixelRect {
        x_min: clip(cx - side / 2.0, width),
        x_max: clip(cx + side / 2.0, width),
        y_min: clip(cy - side / 2.0, height),
        y_max: clip(cy + side / 2.0, height),
    };
    (rect.width() >= 2 && rect.height() >= 2).then_some(rect)
}

/// One fixed rect per view.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    pub height: usize,
    pub width: usize,
    pub rects: Vec<PixelRect>,
}

impl PatchMask {
    /// A `psize` rect per view centered on the image of the grid center, shifted inside
    /// the image when needed.
    pub fn centered(calibs: &[CameraCalibration], grid: &GroundGrid, psize: (usize, usize)) -> Result<Self> {
        let (ph, pw) = psize;
        let first = calibs.first().ok_or_else(|| Error::DegenerateRig("no views".into()))?;
        let (h, w) = (first.height(), first.width());
        if ph > h || pw > w {
            return Err(Error::BadSize(ph, pw));
        }
        let m = grid.extent_max();
        let center = Vector3::new((grid.origin[0] + m[0]) / 2.0, (grid.origin[1] + m[1]) / 2.0, 0.0);
        let mut rects = Vec::with_capacity(calibs.len());
        for c in calibs {
            let p = world_to_pixel(c, &center)?;
            let x = (p.x - pw as f64 / 2.0).round().clamp(0.0, (w - pw) as f64) as usize;
            let y = (p.y - ph as f64 / 2.0).round().clamp(0.0, (h - ph) as f64) as usize;
            rects.push(PixelRect { x_min: x, x_max: x + pw, y_min: y, y_max: y + ph });
        }
        Ok(Self { height: h, width: w, rects })
    }

    /// Binary mask of one view as a 3-channel image.
    pub fn mask(&self, view: usize) -> Image {
        let r = self.rects[view];
        Image::from_fn(self.height, self.width, 3, |row, col, _| {
            if (r.y_min..r.y_max).contains(&row) && (r.x_min..r.x_max).contains(&col) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn placements(&self) -> Vec<PatchPlacement> {
        self.rects.iter().enumerate().map(|(v, &rect)| PatchPlacement { view_id: v, instance_id: 0, rect }).collect()
    }
}

/// Masked patch step: every view gradient is multiplied by its mask, cropped to the mask
/// rect, resized to the patch size, and the views are averaged.
pub fn mask_step(per_view_gradients: &[Image], mask: &PatchMask, psize: (usize, usize)) -> Result<Image> {
    if per_view_gradients.len() != mask.rects.len() {
        return Err(Error::ShapeMismatch(format!("{} gradients for {} mask views", per_view_gradients.len(), mask.rects.len())));
    }
    let (ph, pw) = psize;
    let mut step = Image::new(ph, pw, 3);
    for (d, g) in per_view_gradients.iter().enumerate() {
        let m = mask.mask(d);
        if !g.same_shape(&m) {
            return Err(Error::ShapeMismatch(format!("view {d} gradient shape {:?}", g.shape())));
        }
        let mut masked = g.clone();
        for (x, w) in masked.data.iter_mut().zip(&m.data) {
            *x *= w;
        }
        let r = mask.rects[d];
        let piece = resize_bilinear(&masked.crop(r.y_min, r.y_max, r.x_min, r.x_max), ph, pw);
        for (s, v) in step.data.iter_mut().zip(&piece.data) {
            *s += v;
        }
    }
    let inv = 1.0 / per_view_gradients.len() as f64;
    step.data.iter_mut().for_each(|s| *s *= inv);
    Ok(step)
}

/// Produces the patch placements of a frame for a given placement mode.
#[derive(Clone, Debug)]
pub struct PlacementPlanner {
    pub calibs: Vec<CameraCalibration>,
    pub split: ViewSplit,
    pub mode: PlacementMode,
    pub torso_fraction: f64,
    pub mask: PatchMask,
}

impl PlacementPlanner {
    pub fn new(calibs: &[CameraCalibration], grid: &GroundGrid, mode: PlacementMode, torso_fraction: f64, psize: (usize, usize)) -> Result<Self> {
        Ok(Self {
            calibs: calibs.to_vec(),
            split: split_views(calibs)?,
            mode,
            torso_fraction,
            mask: PatchMask::centered(calibs, grid, psize)?,
        })
    }

    fn direct(&self, truth: &GroundTruth, view: usize, ped: usize) -> Option<PatchPlacement> {
        let ann = &truth.annotations[view][ped];
        if !ann.visible {
            return None;
        }
        let c = &self.calibs[view];
        torso_rect(ann, self.torso_fraction, c.height(), c.width()).map(|rect| PatchPlacement { view_id: view, instance_id: ped, rect })
    }

    /// Placements for every pedestrian: a torso rect in the source view of each camera
    /// group, transferred to the group's destination views in which the pedestrian is
    /// visible. Pedestrians hidden in a source view are patched directly in the
    /// destinations. Views where the pedestrian is occluded get no placement.
    pub fn placements(&self, truth: &GroundTruth) -> Result<Vec<PatchPlacement>> {
        if self.mode == PlacementMode::PerViewMask {
            return Ok(self.mask.placements());
        }
        if truth.annotations.len() != self.calibs.len() {
            return Err(Error::ShapeMismatch("annotations do not match the rig".into()));
        }
        let mut out = Vec::new();
        for (k, ped) in truth.pedestrians.iter().enumerate() {
            let anchor = Vector2::new(ped.ground_position[0], ped.ground_position[1]);
            for set in &self.split.sets {
                match self.direct(truth, set.source, k) {
                    Some(src) => {
                        out.push(src);
                        for &d in &set.destinations {
                            if !truth.annotations[d][k].visible {
                                continue;
                            }
                            match transfer_placement(&src, &self.calibs[set.source], &self.calibs[d], &anchor) {
                                Ok(Some(p)) => out.push(p),
                                Ok(None) => {}
                                // Foot outside one of the images: place directly instead.
                                Err(Error::AnchorNotVisible(_)) => out.extend(self.direct(truth, d, k)),
                                Err(e) => return Err(e),
                            }
                        }
                    }
                    None => {
                        for &d in &set.destinations {
                            out.extend(self.direct(truth, d, k));
                        }
                    }
                }
            }
        }
        out.sort_by_key(|p| (p.view_id, p.instance_id));
        Ok(out)
    }

    /// Placements restricted to the first `k` views.
    pub fn placements_in_views(&self, truth: &GroundTruth, k: usize) -> Result<Vec<PatchPlacement>> {
        Ok(self.placements(truth)?.into_iter().filter(|p| p.view_id < k).collect())
    }
}
