//! `hydra-bench`: dataset generation, victim training, patch attacks, evaluation and
//! reporting for the multiview patch attack experiments.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hydra_core::{Error, Result};

use commands::{AttackArgs, AttackMode, EvaluateArgs};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "hydra-bench", version, about = "Multiview adversarial patch experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and persist the synthetic multiview dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a victim detector.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides the detector seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the detector architecture.
        #[arg(long, value_parser = ["conv", "attn"])]
        arch: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize a patch against a victim.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Victim weights file.
        #[arg(long)]
        victim: PathBuf,
        #[arg(long, value_enum)]
        mode: AttackMode,
        /// Overrides the attack seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Allow a patch method to run against the other architecture.
        #[arg(long)]
        allow_mismatch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a victim, clean or under a patch.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        victim: PathBuf,
        /// Patch artifact directory.
        #[arg(long)]
        patch: Option<PathBuf>,
        /// Apply the patch to the first k views only.
        #[arg(long)]
        views_attacked: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect evaluations into plot-ready CSVs and a summary.
    Report {
        /// Directory searched recursively for evaluation results.
        results: PathBuf,
        /// Defaults to `<results>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>, sub: &str) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.join(sub))
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HYDRA_BENCH_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| Error::ConfigInvalid(format!("HYDRA_BENCH_THREADS={v} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::ConfigInvalid(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData { config, seed, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::gen_data(&cfg, &config, &out_dir(&cfg, out, "data"))
        }
        Command::Train { config, data, seed, arch, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.detector.seed = s;
            }
            match arch.as_deref() {
                Some("conv") => cfg.detector.architecture = hydra_core::detector::Architecture::Conv,
                Some("attn") => cfg.detector.architecture = hydra_core::detector::Architecture::Attn,
                _ => {}
            }
            let sub = format!("victim_{}", cfg.detector.architecture.to_string().to_lowercase());
            commands::train_cmd(&cfg, &config, &data, &out_dir(&cfg, out, &sub))
        }
        Command::Attack { config, data, victim, mode, seed, allow_mismatch, out } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.attack.seed = s;
            }
            let sub = format!("patch_{}_s{}", mode.name(), cfg.attack.seed);
            let args = AttackArgs { data: &data, victim: &victim, mode, allow_mismatch };
            commands::attack_cmd(&cfg, &config, &args, &out_dir(&cfg, out, &sub))
        }
        Command::Evaluate { config, data, victim, patch, views_attacked, out } => {
            let cfg = load(&config)?;
            let args = EvaluateArgs { data: &data, victim: &victim, patch: patch.as_deref(), views_attacked };
            commands::evaluate_cmd(&cfg, &config, &args, &out_dir(&cfg, out, "eval"))
        }
        Command::Report { results, out } => {
            let out = out.unwrap_or_else(|| results.join("report"));
            commands::report_cmd(&results, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
