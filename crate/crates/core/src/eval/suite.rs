use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, decode_detections, match_detections, MatchResult, MetricsReport};
use crate::attack::{place_patches, Patch, PlacementMode, PlacementPlanner};
use crate::detector::{forward, DetectorWeights};
use crate::error::{Error, Result};
use crate::scene::MultiviewFrame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    /// Suppression radius in grid cells.
    pub nms_radius: f64,
    /// Match radius in meters.
    pub match_radius: f64,
    /// Torso patch width as a fraction of the body width (per-target placement).
    pub torso_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.4, nms_radius: 2.0, match_radius: 0.5, torso_fraction: 0.4 }
    }
}

/// A patch together with how it is placed.
#[derive(Clone, Copy, Debug)]
pub struct PatchSpec<'a> {
    pub patch: &'a Patch,
    pub mode: PlacementMode,
}

/// Metrics over `frames`, optionally with the patch applied to the first `views_attacked`
/// views (all views when `None`).
pub fn evaluate(
    weights: &DetectorWeights,
    frames: &[MultiviewFrame],
    patch: Option<PatchSpec>,
    config: &EvalConfig,
    views_attacked: Option<usize>,
) -> Result<MetricsReport> {
    let planner = match patch {
        Some(p) => Some(PlacementPlanner::new(&weights.calibs, &weights.grid, p.mode, config.torso_fraction, p.patch.psize())?),
        None => None,
    };
    let mut matches = MatchResult::default();
    let mut gt = 0;
    for f in frames {
        let out = match (&planner, patch) {
            (Some(pl), Some(p)) => {
                let k = views_attacked.unwrap_or(weights.num_views());
                let placements = pl.placements_in_views(&f.truth, k)?;
                forward(weights, &place_patches(&f.images, &placements, p.patch)?)?
            }
            _ => forward(weights, &f.images)?,
        };
        let dets = decode_detections(&out.occupancy, config.threshold, config.nms_radius);
        matches.merge(&match_detections(&dets.positions(), &f.truth.positions(), config.match_radius));
        gt += f.truth.pedestrians.len();
    }
    compute_metrics(&matches, gt, config.match_radius).ok_or_else(|| Error::EmptyResults("no ground-truth pedestrians".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub epoch: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub clean: MetricsReport,
    pub attacked: MetricsReport,
    pub moda_drop_relative: f64,
    pub moda_drop_absolute: f64,
    pub recall_drop_relative: f64,
    /// Fraction of ground-truth pedestrians missed under attack.
    pub miss_rate: f64,
    /// Headline attack metric, equal to the relative MODA drop.
    pub attack_success_rate: f64,
    pub trajectory: Vec<CheckpointMetrics>,
}

fn relative_drop(clean: f64, attacked: f64) -> f64 {
    if clean > 0.0 {
        (clean - attacked) / clean
    } else {
        0.0
    }
}

impl AttackReport {
    pub fn new(clean: MetricsReport, attacked: MetricsReport, trajectory: Vec<CheckpointMetrics>) -> Self {
        let moda_drop_relative = relative_drop(clean.moda, attacked.moda);
        Self {
            moda_drop_absolute: clean.moda - attacked.moda,
            recall_drop_relative: relative_drop(clean.recall, attacked.recall),
            miss_rate: attacked.fn_ as f64 / attacked.gt_count as f64,
            attack_success_rate: moda_drop_relative,
            moda_drop_relative,
            clean,
            attacked,
            trajectory,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub patch: String,
    pub victim: String,
    pub report: AttackReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub patch: String,
    pub victim: String,
    pub k: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub matrix: Vec<TransferCell>,
    pub sweeps: Vec<SweepRow>,
}

/// Evaluates every patch against every victim, plus the attacked-views sweep
/// `k = 0..=N` for each pair.
pub fn run_experiment_suite(
    victims: &[(&str, &DetectorWeights)],
    patches: &[(&str, PatchSpec)],
    frames: &[MultiviewFrame],
    config: &EvalConfig,
) -> Result<SuiteResult> {
    if victims.is_empty() || patches.is_empty() {
        return Err(Error::EmptyResults("suite needs at least one victim and one patch".into()));
    }
    let mut out = SuiteResult::default();
    for &(vname, w) in victims {
        let clean = evaluate(w, frames, None, config, None)?;
        for &(pname, spec) in patches {
            let mut attacked = None;
            for k in 0..=w.num_views() {
                let m = if k == 0 { clean.clone() } else { evaluate(w, frames, Some(spec), config, Some(k))? };
                if k == w.num_views() {
                    attacked = Some(m.clone());
                }
                out.sweeps.push(SweepRow { patch: pname.into(), victim: vname.into(), k, metrics: m });
            }
            let report = AttackReport::new(clean.clone(), attacked.expect("k = N evaluated"), Vec::new());
            out.matrix.push(TransferCell { patch: pname.into(), victim: vname.into(), report });
        }
    }
    Ok(out)
}

const METRIC_HEADER: &str = "moda,modp,precision,recall,tp,fp,fn,gt";

fn metric_cols(m: &MetricsReport) -> String {
    format!("{},{},{},{},{},{},{},{}", m.moda, m.modp, m.precision, m.recall, m.tp, m.fp, m.fn_, m.gt_count)
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Writes `transfer_matrix.csv` and `views_sweep.csv` into `dir`.
pub fn write_suite_csvs(result: &SuiteResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = String::from("patch,victim,clean_moda,attacked_moda,moda_drop_relative,recall_drop_relative,attack_success_rate\n");
    for c in &result.matrix {
        let r = &c.report;
        m.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.patch, c.victim, r.clean.moda, r.attacked.moda, r.moda_drop_relative, r.recall_drop_relative, r.attack_success_rate
        ));
    }
    write_text(&dir.join("transfer_matrix.csv"), &m)?;
    let mut s = format!("patch,victim,k,{METRIC_HEADER}\n");
    for r in &result.sweeps {
        s.push_str(&format!("{},{},{},{}\n", r.patch, r.victim, r.k, metric_cols(&r.metrics)));
    }
    write_text(&dir.join("views_sweep.csv"), &s)
}

/// Writes `metrics.csv` (clean and attacked rows), `trajectory.csv` and `report.json`.
pub fn write_attack_report(report: &AttackReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = format!("condition,{METRIC_HEADER}\n");
    m.push_str(&format!("clean,{}\n", metric_cols(&report.clean)));
    m.push_str(&format!("attacked,{}\n", metric_cols(&report.attacked)));
    write_text(&dir.join("metrics.csv"), &m)?;
    let mut t = format!("epoch,{METRIC_HEADER}\n");
    for c in &report.trajectory {
        t.push_str(&format!("{},{}\n", c.epoch, metric_cols(&c.metrics)));
    }
    write_text(&dir.join("trajectory.csv"), &t)?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(report).expect("serializable"))
}
