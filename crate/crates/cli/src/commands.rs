use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hydra_core::attack::{
    baseline_patches, corner_targets, read_patch, run_attention_attack, run_multiview_attack, weights_digest, write_loss_log, write_patch,
    AttackOutcome, BaselineKind, PatchManifest, PlacementMode, PATCH_VERSION,
};
use hydra_core::detector::{read_weights, train, write_loss_csv, write_weights, Architecture};
use hydra_core::eval::{
    evaluate, run_experiment_suite, write_attack_report, write_suite_csvs, AttackReport, CheckpointMetrics, MetricsReport, PatchSpec,
    SuiteResult, SweepRow, TransferCell,
};
use hydra_core::scene::{generate_dataset, load_dataset, persist_dataset};
use hydra_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::{io_err, write_file, Manifest};

pub const WEIGHTS_FILE: &str = "weights.hwts";
const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackMode {
    Alg1,
    Alg2,
    BaselineRandom,
    BaselineSingleview,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Alg1 => "alg1",
            AttackMode::Alg2 => "alg2",
            AttackMode::BaselineRandom => "baseline-random",
            AttackMode::BaselineSingleview => "baseline-singleview",
        }
    }

    fn placement(self) -> PlacementMode {
        match self {
            AttackMode::Alg2 => PlacementMode::PerViewMask,
            _ => PlacementMode::PerTarget,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value).expect("serializable").as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))
}

fn echo_config(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    write_file(&out.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())
}

pub fn gen_data(cfg: &ExperimentConfig, config_path: &Path, out: &Path) -> Result<()> {
    let ds = generate_dataset(&cfg.scene, cfg.seed)?;
    persist_dataset(&ds, out)?;
    echo_config(cfg, out)?;
    let mut m = Manifest::new("gen-data", Some(cfg.seed));
    m.input("config", config_path)?;
    m.param("frames", ds.frames.len()).param("train_frames", cfg.scene.train_frames).param("test_frames", cfg.scene.test_frames);
    m.outputs = vec!["meta.json".into(), "calib/".into(), "frames/".into(), RESOLVED_CONFIG.into()];
    m.write(out)?;
    log::info!("wrote {} frames to {}", ds.frames.len(), out.display());
    Ok(())
}

pub fn train_cmd(cfg: &ExperimentConfig, config_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let (weights, log) = train(&ds, &cfg.detector)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_weights(&weights, &out.join(WEIGHTS_FILE))?;
    write_loss_csv(&log, &out.join("loss.csv"))?;
    echo_config(cfg, out)?;
    let mut m = Manifest::new("train", Some(cfg.detector.seed));
    m.input("config", config_path)?.input("dataset", data)?;
    m.param("architecture", cfg.detector.architecture).param("epochs", cfg.detector.epochs);
    m.outputs = vec![WEIGHTS_FILE.into(), "loss.csv".into(), RESOLVED_CONFIG.into()];
    m.write(out)
}

pub struct AttackArgs<'a> {
    pub data: &'a Path,
    pub victim: &'a Path,
    pub mode: AttackMode,
    pub allow_mismatch: bool,
}

pub fn attack_cmd(cfg: &ExperimentConfig, config_path: &Path, args: &AttackArgs, out: &Path) -> Result<()> {
    let ds = load_dataset(args.data)?;
    let weights = read_weights(args.victim)?;
    let expected = if args.mode == AttackMode::Alg2 { Architecture::Attn } else { Architecture::Conv };
    if weights.architecture() != expected && !(args.allow_mismatch && args.mode != AttackMode::Alg2) {
        return Err(Error::WrongVictim(format!(
            "{} expects a {expected} victim, got {} (pass --allow-mismatch for transfer runs)",
            args.mode.name(),
            weights.architecture()
        )));
    }
    let mut ac = cfg.attack.clone();
    ac.mode = args.mode.placement();
    if args.mode == AttackMode::Alg2 && ac.attention_targets.is_empty() {
        ac.attention_targets = corner_targets(&weights.grid, weights.config.attn_points);
    }
    let frames = ds.train();
    let outcome: AttackOutcome = match args.mode {
        AttackMode::Alg1 => run_multiview_attack(&weights, frames, &ac)?,
        AttackMode::Alg2 => run_attention_attack(&weights, frames, &ac)?,
        AttackMode::BaselineRandom => baseline_patches(BaselineKind::Random, &weights, frames, &ac, cfg.baseline_view)?,
        AttackMode::BaselineSingleview => baseline_patches(BaselineKind::SingleViewOpt, &weights, frames, &ac, cfg.baseline_view)?,
    };
    let manifest = PatchManifest {
        schema_version: PATCH_VERSION,
        kind: "patch".into(),
        method: args.mode.name().into(),
        config: ac.clone(),
        victim_sha256: weights_digest(&weights),
        final_total: outcome.log.last().map(|r| r.total),
        final_attention: outcome.log.last().filter(|_| args.mode == AttackMode::Alg2).map(|r| r.attention),
    };
    write_patch(&outcome.patch, &manifest, out)?;
    write_loss_log(&outcome.log, &out.join("loss_log.csv"))?;
    for (epoch, p) in &outcome.checkpoints {
        write_patch(p, &manifest, &checkpoint_dir(out, *epoch))?;
    }
    echo_config(cfg, out)?;
    let mut m = Manifest::new("attack", Some(ac.seed));
    m.input("config", config_path)?.input("dataset", args.data)?.input("victim", args.victim)?;
    m.param("mode", args.mode.name()).param("allow_mismatch", args.allow_mismatch);
    m.outputs = vec!["patch.png".into(), "patch.raw".into(), "manifest.json".into(), "loss_log.csv".into(), "checkpoints/".into()];
    m.write(out)
}

fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

fn checkpoints(patch_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let dir = patch_dir.join("checkpoints");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
        let p = entry.map_err(|e| io_err(&dir, e))?.path();
        let epoch = p.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("epoch_")).and_then(|n| n.parse().ok());
        if let Some(e) = epoch {
            out.push((e, p));
        }
    }
    out.sort();
    Ok(out)
}

pub struct EvaluateArgs<'a> {
    pub data: &'a Path,
    pub victim: &'a Path,
    pub patch: Option<&'a Path>,
    pub views_attacked: Option<usize>,
}

pub fn evaluate_cmd(cfg: &ExperimentConfig, config_path: &Path, args: &EvaluateArgs, out: &Path) -> Result<()> {
    let ds = load_dataset(args.data)?;
    let weights = read_weights(args.victim)?;
    let frames = ds.test();
    let mut m = Manifest::new("evaluate", None);
    m.input("config", config_path)?.input("dataset", args.data)?.input("victim", args.victim)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let Some(patch_dir) = args.patch else {
        let clean = evaluate(&weights, frames, None, &cfg.eval, None)?;
        write_json(&out.join("clean.json"), &clean)?;
        m.outputs = vec!["clean.json".into()];
        return m.write(out);
    };
    let (patch, pm) = read_patch(patch_dir)?;
    m.input("patch", patch_dir)?;
    if let Some(k) = args.views_attacked {
        if k > weights.num_views() {
            return Err(Error::ConfigInvalid(format!("--views-attacked {k} exceeds {} views", weights.num_views())));
        }
        m.param("views_attacked", k);
    }
    let spec = PatchSpec { patch: &patch, mode: pm.config.mode };
    let victim_name = weights.architecture().to_string().to_lowercase();
    let patch_name = format!("{}-s{}", pm.method, pm.config.seed);
    let suite = run_experiment_suite(&[(&victim_name, &weights)], &[(&patch_name, spec)], frames, &cfg.eval)?;
    let clean = suite.sweeps[0].metrics.clone();
    let attacked = match args.views_attacked {
        Some(k) => suite.sweeps[k].metrics.clone(),
        None => suite.matrix[0].report.attacked.clone(),
    };
    let mut trajectory = Vec::new();
    for (epoch, dir) in checkpoints(patch_dir)? {
        let (p, _) = read_patch(&dir)?;
        let metrics = evaluate(&weights, frames, Some(PatchSpec { patch: &p, mode: pm.config.mode }), &cfg.eval, args.views_attacked)?;
        trajectory.push(CheckpointMetrics { epoch, metrics });
    }
    let report = AttackReport::new(clean, attacked, trajectory);
    write_attack_report(&report, out)?;
    write_suite_csvs(&suite, out)?;
    write_json(&out.join("cell.json"), &TransferCell { patch: patch_name, victim: victim_name, report })?;
    write_json(&out.join("sweep.json"), &suite.sweeps)?;
    m.outputs = ["metrics.csv", "trajectory.csv", "report.json", "transfer_matrix.csv", "views_sweep.csv", "cell.json", "sweep.json"]
        .map(String::from)
        .to_vec();
    m.write(out)
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn summary_row(label: &str, m: &MetricsReport) -> String {
    format!("| {label} | {:.3} | {:.3} | {:.3} | {:.3} | {} | {} | {} |\n", m.moda, m.modp, m.precision, m.recall, m.tp, m.fp, m.fn_)
}

/// Collects every evaluation under `results` into plot-ready CSVs and a markdown summary.
pub fn report_cmd(results: &Path, out: &Path) -> Result<()> {
    let mut cell_paths = Vec::new();
    find_files(results, "cell.json", &mut cell_paths)?;
    cell_paths.sort();
    if cell_paths.is_empty() {
        return Err(Error::EmptyResults(results.display().to_string()));
    }
    let mut suite = SuiteResult::default();
    let mut m = Manifest::new("report", None);
    for p in &cell_paths {
        let cell: TransferCell = read_json(p)?;
        let sweep_path = p.with_file_name("sweep.json");
        if sweep_path.exists() {
            let rows: Vec<SweepRow> = read_json(&sweep_path)?;
            suite.sweeps.extend(rows);
        }
        let rel = p.strip_prefix(results).unwrap_or(p).display().to_string();
        m.input(&rel, p)?;
        suite.matrix.push(cell);
    }
    write_suite_csvs(&suite, out)?;
    let mut outputs = vec!["transfer_matrix.csv".to_string(), "views_sweep.csv".into(), "summary.md".into()];
    for cell in &suite.matrix {
        let name = format!("curves/{}__{}.csv", sanitize(&cell.patch), sanitize(&cell.victim));
        let mut csv = String::from("epoch,moda,recall,precision,modp\n");
        for c in &cell.report.trajectory {
            let _ = writeln!(csv, "{},{},{},{},{}", c.epoch, c.metrics.moda, c.metrics.recall, c.metrics.precision, c.metrics.modp);
        }
        write_file(&out.join(&name), csv.as_bytes())?;
        outputs.push(name);
    }
    let mut md = String::from("# Attack summary\n\n");
    for cell in &suite.matrix {
        let _ = writeln!(md, "## {} vs {}\n", cell.patch, cell.victim);
        md.push_str("| run | MODA | MODP | precision | recall | TP | FP | FN |\n|---|---|---|---|---|---|---|---|\n");
        md.push_str(&summary_row("clean", &cell.report.clean));
        md.push_str(&summary_row("attacked", &cell.report.attacked));
        let r = &cell.report;
        let _ = writeln!(
            md,
            "\nRelative MODA drop {:.1}%, relative recall drop {:.1}%, miss rate {:.1}%.\n",
            100.0 * r.moda_drop_relative,
            100.0 * r.recall_drop_relative,
            100.0 * r.miss_rate
        );
    }
    md.push_str("## Transfer matrix (relative MODA drop)\n\n| patch | victim | drop |\n|---|---|---|\n");
    for cell in &suite.matrix {
        let _ = writeln!(md, "| {} | {} | {:.1}% |", cell.patch, cell.victim, 100.0 * cell.report.moda_drop_relative);
    }
    write_file(&out.join("summary.md"), md.as_bytes())?;
    m.outputs = outputs;
    m.write(out)
}
