use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention_loss, attention_loss_gradient, pcgrad_combine};
use super::placement::{mask_step, PlacementPlanner};
use super::{compute_patch_step, init_patch, place_patches, update_patch, AttackConfig, Patch, PlacementMode};
use crate::detector::{input_gradients_many, loss_with_gradient, Architecture, DetectorWeights, LossForm, OutputGradient};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::scene::{splitmix64, MultiviewFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackLogRecord {
    pub epoch: usize,
    pub iter: usize,
    pub ground: f64,
    pub single_view_mean: f64,
    pub attention: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub patch: Patch,
    pub log: Vec<AttackLogRecord>,
    /// Patch after each completed epoch, starting with the initial patch at epoch 0.
    pub checkpoints: Vec<(usize, Patch)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineKind {
    Random,
    SingleViewOpt,
}

struct LoopSpec<'a> {
    weights: &'a DetectorWeights,
    frames: &'a [MultiviewFrame],
    config: &'a AttackConfig,
    planner: PlacementPlanner,
    /// Combine the detection gradient with the attention gradient by surgery.
    attention: bool,
    /// Only this view is patched and contributes to the step.
    only_view: Option<usize>,
}

struct FrameStep {
    step: Image,
    weight: f64,
    ground: f64,
    single_view_mean: f64,
    attention: f64,
    total: f64,
}

fn frame_step(spec: &LoopSpec, frame: &MultiviewFrame, patch: &Patch) -> Result<Option<FrameStep>> {
    let cfg = spec.config;
    let mut placements = spec.planner.placements(&frame.truth)?;
    if let Some(v) = spec.only_view {
        placements.retain(|p| p.view_id == v);
    }
    if placements.is_empty() {
        return Ok(None);
    }
    let patched = place_patches(&frame.images, &placements, patch)?;
    let mut breakdown = None;
    let mut att_value = 0.0;
    let (_, mut grads) = input_gradients_many(spec.weights, &patched, |out| {
        let (b, g_det) = loss_with_gradient(out, &frame.truth, cfg.omega, LossForm::Norm)?;
        breakdown = Some(b);
        if !spec.attention {
            return Ok(vec![g_det]);
        }
        let state = out.attention.as_ref().ok_or_else(|| Error::WrongVictim("victim exposes no attention state".into()))?;
        att_value = attention_loss(state, &cfg.attention_targets)?.total;
        let scale = cfg.attention_loss_sign * cfg.attention_weight;
        let mut g_att = OutputGradient::zeros_like(out);
        g_att.sampling_locations =
            Some(attention_loss_gradient(state, &cfg.attention_targets)?.into_iter().map(|[x, y]| [scale * x, scale * y]).collect());
        Ok(vec![g_det, g_att])
    })?;
    let b = breakdown.expect("objective evaluated");
    if !b.total.is_finite() || !att_value.is_finite() {
        return Err(Error::Diverged(format!("non-finite attack loss on frame {}", frame.frame_id)));
    }
    let per_view = if spec.attention {
        let g_att = grads.pop().expect("attention gradient");
        let g_det = grads.pop().expect("detection gradient");
        pcgrad_combine(&g_det, &g_att)?
    } else {
        grads.pop().expect("detection gradient")
    };
    let psize = patch.psize();
    let (step, weight) = match spec.planner.mode {
        PlacementMode::PerViewMask if spec.only_view.is_none() => (mask_step(&per_view, &spec.planner.mask, psize)?, 1.0),
        _ => (compute_patch_step(&per_view, &placements, psize)?, placements.len() as f64),
    };
    let single_view_mean = b.single_view_mean();
    Ok(Some(FrameStep { step, weight, ground: b.ground, single_view_mean, attention: att_value, total: b.total }))
}

fn attack_loop(spec: &LoopSpec) -> Result<AttackOutcome> {
    let cfg = spec.config;
    cfg.validate()?;
    if spec.frames.is_empty() {
        return Err(Error::ConfigInvalid("attack needs at least one frame".into()));
    }
    let psize = (cfg.psize[0], cfg.psize[1]);
    let mut patch = init_patch(psize)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xA77A_C4));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::new();
    let mut checkpoints = vec![(0, patch.clone())];

    'epochs: for epoch in 1..=cfg.n_epochs {
        for iter in 1..=cfg.n_iter {
            let mut acc: Option<Image> = None;
            let mut weight = 0.0;
            let mut parts = Vec::with_capacity(cfg.frames_per_iter);
            for _ in 0..cfg.frames_per_iter {
                if cursor == order.len() {
                    order = (0..spec.frames.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let frame = &spec.frames[order[cursor]];
                cursor += 1;
                if let Some(fs) = frame_step(spec, frame, &patch)? {
                    let a = acc.get_or_insert_with(|| Image::new(psize.0, psize.1, 3));
                    for (x, s) in a.data.iter_mut().zip(&fs.step.data) {
                        *x += fs.weight * s;
                    }
                    weight += fs.weight;
                    parts.push(fs);
                }
            }
            let Some(mut step) = acc else { continue };
            step.data.iter_mut().for_each(|x| *x /= weight);
            if cfg.normalize_step {
                let m = step.max_abs();
                if m > 0.0 {
                    step.data.iter_mut().for_each(|x| *x /= m);
                }
            }
            let n = parts.len() as f64;
            let mean = |f: fn(&FrameStep) -> f64| parts.iter().map(f).sum::<f64>() / n;
            let rec = AttackLogRecord {
                epoch,
                iter,
                ground: mean(|p| p.ground),
                single_view_mean: mean(|p| p.single_view_mean),
                attention: mean(|p| p.attention),
                total: mean(|p| p.total),
            };
            let stop = cfg.stop_loss.is_some_and(|s| rec.total > s);
            log.push(rec);
            patch = update_patch(&patch, &step, cfg.alpha)?;
            if stop {
                checkpoints.push((epoch, patch.clone()));
                break 'epochs;
            }
        }
        checkpoints.push((epoch, patch.clone()));
    }
    Ok(AttackOutcome { patch, log, checkpoints })
}

fn planner_for(weights: &DetectorWeights, config: &AttackConfig, mode: PlacementMode) -> Result<PlacementPlanner> {
    PlacementPlanner::new(&weights.calibs, &weights.grid, mode, config.torso_fraction, (config.psize[0], config.psize[1]))
}

/// Patch optimization by per-view gradient aggregation: every iteration places the
/// patch on the frame(s), ascends the weighted detection loss and averages the
/// resized per-placement gradient crops into one patch step.
pub fn run_multiview_attack(weights: &DetectorWeights, frames: &[MultiviewFrame], config: &AttackConfig) -> Result<AttackOutcome> {
    let planner = planner_for(weights, config, config.mode)?;
    attack_loop(&LoopSpec { weights, frames, config, planner, attention: false, only_view: None })
}

/// Attention-aware patch optimization with one fixed patch rect per view: the detection
/// loss gradient and the attention loss gradient are combined by gradient surgery
/// before the masked per-view step.
pub fn run_attention_attack(weights: &DetectorWeights, frames: &[MultiviewFrame], config: &AttackConfig) -> Result<AttackOutcome> {
    if weights.architecture() != Architecture::Attn {
        return Err(Error::WrongVictim(format!("attention attack needs an ATTN victim, got {}", weights.architecture())));
    }
    let planner = planner_for(weights, config, PlacementMode::PerViewMask)?;
    attack_loop(&LoopSpec { weights, frames, config, planner, attention: true, only_view: None })
}

/// Reference patches: uniform noise, or a patch optimized against a single view.
pub fn baseline_patches(
    kind: BaselineKind,
    weights: &DetectorWeights,
    frames: &[MultiviewFrame],
    config: &AttackConfig,
    view: usize,
) -> Result<AttackOutcome> {
    match kind {
        BaselineKind::Random => {
            let (h, w) = (config.psize[0], config.psize[1]);
            init_patch((h, w))?;
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x4A4D_D0));
            let values = Image::from_fn(h, w, 3, |_, _, _| rng.random::<f64>());
            let patch = Patch { values };
            Ok(AttackOutcome { patch: patch.clone(), log: Vec::new(), checkpoints: vec![(0, patch)] })
        }
        BaselineKind::SingleViewOpt => {
            if view >= weights.num_views() {
                return Err(Error::ConfigInvalid(format!("view {view} out of range")));
            }
            let planner = planner_for(weights, config, config.mode)?;
            attack_loop(&LoopSpec { weights, frames, config, planner, attention: false, only_view: Some(view) })
        }
    }
}
