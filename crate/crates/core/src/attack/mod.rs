//! Multiview adversarial patch generation: per-target placement with gradient
//! aggregation across views, and the attention-aware variant with gradient surgery.

mod artifact;
mod attention;
mod placement;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{warp_region_in_place, PatchPlacement};
use crate::raster::{resize_bilinear, Image};

pub use artifact::{read_patch, weights_digest, write_loss_log, write_patch, PatchManifest, PATCH_VERSION};
pub use attention::{attention_loss, attention_loss_gradient, corner_targets, pcgrad, pcgrad_combine, AttentionLossTerms};
pub use placement::{mask_step, torso_rect, PatchMask, PlacementPlanner};
pub use run::{baseline_patches, run_attention_attack, run_multiview_attack, AttackLogRecord, AttackOutcome, BaselineKind};

/// The optimizable patch δ, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub values: Image,
}

impl Patch {
    pub fn psize(&self) -> (usize, usize) {
        (self.values.height, self.values.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlacementMode {
    /// One placement per visible pedestrian torso, transferred across views.
    PerTarget,
    /// One fixed rect per view.
    PerViewMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub alpha: f64,
    pub n_epochs: usize,
    /// Iterations per epoch; each iteration consumes `frames_per_iter` frames.
    pub n_iter: usize,
    pub frames_per_iter: usize,
    pub omega: f64,
    pub stop_loss: Option<f64>,
    pub mode: PlacementMode,
    /// (height, width) of the patch.
    pub psize: [usize; 2],
    /// Torso patch width as a fraction of the projected body width.
    pub torso_fraction: f64,
    /// Ground-grid targets `(x, y)` of the attention loss, one per sampling point.
    pub attention_targets: Vec<[f64; 2]>,
    /// -1 drags the sampling locations toward the targets, +1 pushes them away.
    pub attention_loss_sign: f64,
    pub attention_weight: f64,
    /// Rescale each step to unit max-abs before applying α.
    pub normalize_step: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            n_epochs: 30,
            n_iter: 40,
            frames_per_iter: 1,
            omega: 1.0,
            stop_loss: None,
            mode: PlacementMode::PerTarget,
            psize: [16, 16],
            torso_fraction: 0.4,
            attention_targets: Vec::new(),
            attention_loss_sign: 1.0,
            attention_weight: 1.0,
            normalize_step: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be finite and non-negative");
        }
        if self.n_epochs == 0 || self.n_iter == 0 || self.frames_per_iter == 0 {
            return bad("n_epochs, n_iter and frames_per_iter must be at least 1");
        }
        if self.psize[0] < 2 || self.psize[1] < 2 {
            return Err(Error::BadSize(self.psize[0], self.psize[1]));
        }
        if !(self.torso_fraction > 0.0) {
            return bad("torso_fraction must be positive");
        }
        if self.attention_loss_sign != 1.0 && self.attention_loss_sign != -1.0 {
            return bad("attention_loss_sign must be +1 or -1");
        }
        Ok(())
    }
}

/// Uniform gray patch.
pub fn init_patch(psize: (usize, usize)) -> Result<Patch> {
    let (h, w) = psize;
    if h < 2 || w < 2 {
        return Err(Error::BadSize(h, w));
    }
    Ok(Patch { values: Image::filled(h, w, 3, 0.5) })
}

/// Returns copies of `images` with the patch warped onto every placement.
pub fn place_patches(images: &[Image], placements: &[PatchPlacement], patch: &Patch) -> Result<Vec<Image>> {
    let mut out = images.to_vec();
    for p in placements {
        let img = out
            .get_mut(p.view_id)
            .ok_or_else(|| Error::ShapeMismatch(format!("placement for view {} of {}", p.view_id, images.len())))?;
        warp_region_in_place(img, &patch.values, p)?;
    }
    Ok(out)
}

/// Crops each placement's rect out of its view gradient, resizes it to the patch size and
/// averages over all placements.
pub fn compute_patch_step(per_view_gradients: &[Image], placements: &[PatchPlacement], psize: (usize, usize)) -> Result<Image> {
    if placements.is_empty() {
        return Err(Error::EmptyPlacementList);
    }
    let (ph, pw) = psize;
    let mut step = Image::new(ph, pw, 3);
    for p in placements {
        let g = per_view_gradients
            .get(p.view_id)
            .ok_or_else(|| Error::ShapeMismatch(format!("no gradient for view {}", p.view_id)))?;
        let r = &p.rect;
        if !r.fits(g.height, g.width) {
            return Err(Error::RectOutOfBounds { rect: [r.x_min, r.x_max, r.y_min, r.y_max], height: g.height, width: g.width });
        }
        let piece = resize_bilinear(&g.crop(r.y_min, r.y_max, r.x_min, r.x_max), ph, pw);
        for (s, v) in step.data.iter_mut().zip(&piece.data) {
            *s += v;
        }
    }
    let inv = 1.0 / placements.len() as f64;
    step.data.iter_mut().for_each(|s| *s *= inv);
    Ok(step)
}

/// `clamp(δ + α · step, 0, 1)`.
pub fn update_patch(patch: &Patch, step: &Image, alpha: f64) -> Result<Patch> {
    if !patch.values.same_shape(step) {
        return Err(Error::ShapeMismatch(format!("patch {:?} vs step {:?}", patch.values.shape(), step.shape())));
    }
    let mut values = patch.values.clone();
    for (v, s) in values.data.iter_mut().zip(&step.data) {
        *v = (*v + alpha * s).clamp(0.0, 1.0);
    }
    Ok(Patch { values })
}
