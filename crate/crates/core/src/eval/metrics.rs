use serde::{Deserialize, Serialize};

use crate::scene::OccupancyMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Ground position in meters.
    pub position: [f64; 2],
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.detections.iter().map(|d| d.position).collect()
    }
}

/// Local maxima (8-neighbourhood) at or above `threshold`, then greedy score-ordered
/// suppression of any peak within `nms_radius` cells of a kept one.
pub fn decode_detections(map: &OccupancyMap, threshold: f64, nms_radius: f64) -> DetectionSet {
    let s = &map.scores;
    let (rows, cols) = (s.rows, s.cols);
    let mut peaks = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = s.get(r, c);
            if !(v >= threshold) {
                continue;
            }
            let mut is_max = true;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    if s.get(rr as usize, cc as usize) > v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                peaks.push((r, c, v));
            }
        }
    }
    // Highest score first; ties broken by raster order so decoding is deterministic.
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for p in peaks {
        let close = kept.iter().any(|k| {
            let d2 = (k.0 as f64 - p.0 as f64).powi(2) + (k.1 as f64 - p.1 as f64).powi(2);
            d2 <= nms_radius * nms_radius
        });
        if !close {
            kept.push(p);
        }
    }
    DetectionSet {
        detections: kept
            .into_iter()
            .map(|(r, c, v)| Detection { position: map.grid.cell_center(r, c), score: v })
            .collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Distances of the matched pairs (m).
    pub distances: Vec<f64>,
}

impl MatchResult {
    pub fn merge(&mut self, other: &MatchResult) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.distances.extend_from_slice(&other.distances);
    }
}

/// Greedy nearest-pair matching: pairs within `r` are taken in order of increasing
/// distance, each detection and each truth at most once.
pub fn match_detections(dets: &[[f64; 2]], truths: &[[f64; 2]], r: f64) -> MatchResult {
    let mut pairs = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let dist = ((d[0] - t[0]).powi(2) + (d[1] - t[1]).powi(2)).sqrt();
            if dist <= r {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut det_used = vec![false; dets.len()];
    let mut truth_used = vec![false; truths.len()];
    let mut distances = Vec::new();
    for (dist, i, j) in pairs {
        if !det_used[i] && !truth_used[j] {
            det_used[i] = true;
            truth_used[j] = true;
            distances.push(dist);
        }
    }
    let tp = distances.len();
    MatchResult { tp, fp: dets.len() - tp, fn_: truths.len() - tp, distances }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
    pub moda: f64,
    pub modp: f64,
    pub precision: f64,
    pub recall: f64,
    pub match_radius: f64,
}

/// Detection metrics over aggregated counts; `None` when there is no ground truth.
pub fn compute_metrics(matches: &MatchResult, gt_count: usize, r: f64) -> Option<MetricsReport> {
    if gt_count == 0 {
        return None;
    }
    let gt = gt_count as f64;
    let MatchResult { tp, fp, fn_, .. } = *matches;
    let modp = if tp == 0 { 0.0 } else { matches.distances.iter().map(|d| 1.0 - d / r).sum::<f64>() / tp as f64 };
    Some(MetricsReport {
        tp,
        fp,
        fn_,
        gt_count,
        moda: 1.0 - (fp + fn_) as f64 / gt,
        modp,
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: tp as f64 / gt,
        match_radius: r,
    })
}
