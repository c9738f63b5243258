use proptest::prelude::*;

use super::*;
use crate::attack::{init_patch, Patch, PlacementMode};
use crate::detector::{DetectorConfig, DetectorWeights};
use crate::geometry::GroundGrid;
use crate::raster::Image;
use crate::scene::{generate_dataset, OccupancyMap, ScoreMap, SceneConfig};

fn grid() -> GroundGrid {
    GroundGrid { origin: [0.0, 0.0], cell_size: 0.25, shape: (24, 24) }
}

fn map_with(splats: &[([f64; 2], f64)]) -> OccupancyMap {
    let mut scores = ScoreMap::zeros(24, 24);
    for &(center, peak) in splats {
        let mut one = ScoreMap::zeros(24, 24);
        one.splat_max(center, 1.0);
        for (s, v) in scores.data.iter_mut().zip(&one.data) {
            *s = s.max(v * peak);
        }
    }
    OccupancyMap { grid: grid(), scores }
}

#[test]
fn decode_examples() {
    assert!(decode_detections(&map_with(&[]), 0.4, 2.0).is_empty());
    let one = decode_detections(&map_with(&[([7.0, 11.0], 1.0)]), 0.4, 2.0);
    assert_eq!(one.len(), 1);
    assert_eq!(one.detections[0].position, grid().cell_center(11, 7));
    // Two splats two cells apart: the lower one is suppressed.
    let two = decode_detections(&map_with(&[([5.0, 5.0], 0.9), ([5.0, 7.0], 1.0)]), 0.4, 3.0);
    assert_eq!(two.len(), 1);
    assert_eq!(two.detections[0].position, grid().cell_center(7, 5));
    assert_eq!(two.detections[0].score, 1.0);
}

/// Brute-force decoding: every cell that no neighbour beats, kept unless a stronger
/// (or equal and earlier) peak lies within the radius.
fn oracle_decode(map: &OccupancyMap, threshold: f64, radius: f64) -> Vec<(usize, usize)> {
    let s = &map.scores;
    let peaks: Vec<(usize, usize, f64)> = (0..s.rows)
        .flat_map(|r| (0..s.cols).map(move |c| (r, c)))
        .filter(|&(r, c)| {
            let v = s.get(r, c);
            v >= threshold
                && (r.saturating_sub(1)..=(r + 1).min(s.rows - 1))
                    .all(|rr| (c.saturating_sub(1)..=(c + 1).min(s.cols - 1)).all(|cc| s.get(rr, cc) <= v))
        })
        .map(|(r, c)| (r, c, s.get(r, c)))
        .collect();
    let mut order = peaks.clone();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for (r, c, _) in order {
        if kept.iter().all(|&(kr, kc)| ((kr as f64 - r as f64).powi(2) + (kc as f64 - c as f64).powi(2)).sqrt() > radius) {
            kept.push((r, c));
        }
    }
    kept
}

/// Maximum number of pairs within `r`, by exhaustive search.
fn oracle_max_matching(dets: &[[f64; 2]], truths: &[[f64; 2]], r: f64) -> usize {
    fn go(i: usize, dets: &[[f64; 2]], truths: &[[f64; 2]], used: &mut Vec<bool>, r: f64) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, dets, truths, used, r);
        for j in 0..truths.len() {
            let d = ((dets[i][0] - truths[j][0]).powi(2) + (dets[i][1] - truths[j][1]).powi(2)).sqrt();
            if !used[j] && d <= r {
                used[j] = true;
                best = best.max(1 + go(i + 1, dets, truths, used, r));
                used[j] = false;
            }
        }
        best
    }
    go(0, dets, truths, &mut vec![false; truths.len()], r)
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    (0.0..6.0f64, 0.0..6.0f64).prop_map(|(x, y)| [x, y])
}

proptest! {
    #[test]
    fn decode_matches_brute_force(
        splats in proptest::collection::vec(((0.0..24.0f64, 0.0..24.0f64), 0.3..1.0f64), 0..5),
        radius in 1.0..4.0f64,
    ) {
        let map = map_with(&splats.iter().map(|&((x, y), p)| ([x, y], p)).collect::<Vec<_>>());
        let got: Vec<[f64; 2]> = decode_detections(&map, 0.4, radius).positions();
        let want: Vec<[f64; 2]> = oracle_decode(&map, 0.4, radius).into_iter().map(|(r, c)| grid().cell_center(r, c)).collect();
        prop_assert_eq!(got, want);
    }

    /// Truths keep pedestrians apart by more than twice the radius, as in the scenes,
    /// so greedy matching cannot be trapped by a chain.
    #[test]
    fn greedy_matching_is_optimal_on_small_scenes(
        dets in proptest::collection::vec(point(), 0..=3),
        truths in proptest::collection::vec(point(), 0..=3),
    ) {
        let r = 0.5;
        let separated = truths.iter().enumerate().all(|(i, a)| {
            truths[..i].iter().all(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() > 2.0 * r)
        });
        prop_assume!(separated);
        let straddles = dets.iter().any(|d| truths.iter().any(|t| {
            (((d[0] - t[0]).powi(2) + (d[1] - t[1]).powi(2)).sqrt() - r).abs() < 1e-6
        }));
        prop_assume!(!straddles);
        let m = match_detections(&dets, &truths, r);
        let best = oracle_max_matching(&dets, &truths, r);
        prop_assert_eq!(m.tp, best);
        prop_assert_eq!(m.fp, dets.len() - best);
        prop_assert_eq!(m.fn_, truths.len() - best);
    }

    #[test]
    fn metric_identities(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        prop_assume!(tp + fn_ > 0);
        let distances = (0..tp).map(|i| 0.5 * i as f64 / 50.0).collect();
        let m = compute_metrics(&MatchResult { tp, fp, fn_, distances }, tp + fn_, 0.5).unwrap();
        let gt = (tp + fn_) as f64;
        prop_assert!((m.moda - (1.0 - (fp + fn_) as f64 / gt)).abs() < 1e-15);
        prop_assert!((m.recall - tp as f64 / gt).abs() < 1e-15);
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        prop_assert!((m.precision - precision).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&m.modp));
    }
}

#[test]
fn match_examples() {
    let pts = [[1.0, 1.0], [2.0, 2.0], [3.0, 1.0]];
    let m = match_detections(&pts, &pts, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
    let m = match_detections(&[], &pts, 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 3));
    // The closer detection wins, the other becomes a false positive.
    let m = match_detections(&[[1.3, 1.0], [1.1, 1.0]], &[[1.0, 1.0]], 0.5);
    assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    assert!((m.distances[0] - 0.1).abs() < 1e-12);
}

#[test]
fn metric_examples() {
    let m = compute_metrics(&MatchResult { tp: 7, fp: 2, fn_: 3, distances: vec![0.0; 7] }, 10, 0.5).unwrap();
    assert!((m.moda - 0.5).abs() < 1e-15);
    assert!((m.recall - 0.7).abs() < 1e-15);
    let perfect = compute_metrics(&MatchResult { tp: 4, fp: 0, fn_: 0, distances: vec![0.0; 4] }, 4, 0.5).unwrap();
    assert_eq!((perfect.moda, perfect.recall, perfect.precision, perfect.modp), (1.0, 1.0, 1.0, 1.0));
    let none = compute_metrics(&MatchResult { tp: 0, fp: 0, fn_: 5, distances: vec![] }, 5, 0.5).unwrap();
    assert_eq!((none.moda, none.recall, none.precision), (0.0, 0.0, 0.0));
    assert!(compute_metrics(&MatchResult::default(), 0, 0.5).is_none());
}

#[test]
fn report_drops() {
    let clean = compute_metrics(&MatchResult { tp: 10, fp: 0, fn_: 0, distances: vec![0.0; 10] }, 10, 0.5).unwrap();
    let hit = compute_metrics(&MatchResult { tp: 6, fp: 1, fn_: 4, distances: vec![0.0; 6] }, 10, 0.5).unwrap();
    let r = AttackReport::new(clean, hit, Vec::new());
    assert!((r.moda_drop_relative - 0.5).abs() < 1e-15);
    assert_eq!(r.attack_success_rate, r.moda_drop_relative);
    assert!((r.recall_drop_relative - 0.4).abs() < 1e-15);
    assert!((r.miss_rate - 0.4).abs() < 1e-15);
}

#[test]
fn suite_sweep_starts_clean_and_evaluation_is_pure() {
    let cfg = SceneConfig { train_frames: 0, test_frames: 3, pedestrians_min: 2, ..SceneConfig::default() };
    let ds = generate_dataset(&cfg, 5).unwrap();
    let w = DetectorWeights::init(&DetectorConfig::conv(), &ds.calibs, ds.grid(), cfg.image_size).unwrap();
    let w_before = w.clone();
    let frames_before = ds.frames.clone();
    let patch = Patch { values: Image::filled(8, 8, 3, 0.9) };
    let gray = init_patch((8, 8)).unwrap();
    let ec = EvalConfig { threshold: 0.1, ..EvalConfig::default() };
    let suite = run_experiment_suite(
        &[("conv", &w)],
        &[("a", PatchSpec { patch: &patch, mode: PlacementMode::PerTarget }), ("g", PatchSpec { patch: &gray, mode: PlacementMode::PerViewMask })],
        ds.test(),
        &ec,
    )
    .unwrap();
    let clean = evaluate(&w, ds.test(), None, &ec, None).unwrap();
    assert_eq!(suite.matrix.len(), 2);
    assert_eq!(suite.sweeps.len(), 10);
    for row in suite.sweeps.iter().filter(|r| r.k == 0) {
        assert_eq!(row.metrics, clean);
    }
    let full = evaluate(&w, ds.test(), Some(PatchSpec { patch: &patch, mode: PlacementMode::PerTarget }), &ec, None).unwrap();
    assert_eq!(suite.matrix[0].report.attacked, full);
    assert_eq!(evaluate(&w, ds.test(), None, &ec, None).unwrap(), clean);
    assert_eq!(w, w_before);
    assert_eq!(ds.frames, frames_before);
    assert_eq!(patch.values, Image::filled(8, 8, 3, 0.9));

    let dir = tempfile::tempdir().unwrap();
    write_suite_csvs(&suite, dir.path()).unwrap();
    let sweep = std::fs::read_to_string(dir.path().join("views_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 11);
    write_attack_report(&suite.matrix[0].report, dir.path()).unwrap();
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn empty_ground_truth_is_reported() {
    let cfg = SceneConfig { train_frames: 0, test_frames: 2, pedestrians_min: 0, pedestrians_max: 0, ..SceneConfig::default() };
    let ds = generate_dataset(&cfg, 5).unwrap();
    let w = DetectorWeights::init(&DetectorConfig::conv(), &ds.calibs, ds.grid(), cfg.image_size).unwrap();
    assert!(matches!(evaluate(&w, ds.test(), None, &EvalConfig::default(), None), Err(crate::Error::EmptyResults(_))));
}
