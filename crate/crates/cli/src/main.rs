//! `fgrr`: generate data, train, evaluate, ablate and self-check.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fgrr_core::scene::{Dataset, DatasetSpec, Shift};
use fgrr_core::selfcheck;
use fgrr_core::training::{
    ablate, evaluate, parse_variants, seed_range, train_with_callback, write_run, Checkpoint, TrainConfig, SEED_ENV,
};

#[derive(Parser)]
#[command(name = "fgrr", version, about = "Domain-adaptive detection with graph reasoning on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a source/target dataset to PNG images and JSON annotations.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DatasetSpec::default().seed)]
        seed: u64,
        #[arg(long, default_value = "moderate")]
        shift: Shift,
        #[arg(long, default_value_t = DatasetSpec::default().source_train)]
        source_train: usize,
        #[arg(long, default_value_t = DatasetSpec::default().target_train)]
        target_train: usize,
        #[arg(long, default_value_t = DatasetSpec::default().target_test)]
        target_test: usize,
    },
    /// Train one model; the seed may be overridden through FGRR_SEED.
    Train {
        /// JSON configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Load images from a `gen-data` directory instead of generating them.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Target mAP@0.5 of a checkpoint on a dataset's held-out target split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every variant on consecutive seeds and tabulate final target mAP.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated: full, no_prr, no_srr, no_ior, source_only.
        #[arg(long, default_value = "full,no_prr,no_srr,no_ior,source_only")]
        variants: String,
        /// Number of seeds, starting at --seed-base.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the oracle battery and print one line per check.
    Selfcheck,
}

fn load_config(path: Option<&Path>, data: Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if data.is_some() {
        cfg.data_dir = data;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, seed, shift, source_train, target_train, target_test } => {
            let spec = DatasetSpec { seed, shift, source_train, target_train, target_test };
            Dataset::generate(&spec)?.save(&out)?;
            println!("wrote {} + {} + {} images to {}", source_train, target_train, target_test, out.display());
        }
        Command::Train { config, out, data } => {
            let mut cfg = load_config(config.as_deref(), data)?;
            cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
            let dataset = cfg.dataset()?;
            let (report, model) = train_with_callback(&cfg, &dataset, |r| {
                println!("epoch {:>3}  lr {:.1e}  loss {:.4}  target mAP {:.4}", r.epoch, r.learning_rate, r.total, r.target_map);
            })?;
            write_run(&out, &report, &model)?;
            if let Some(why) = &report.aborted {
                eprintln!("stopped early: {why}");
            }
            println!("seed {}  final mAP {:.4}  best {:.4}  {:.1}s", cfg.seed, report.final_map, report.best_map, report.wall_clock_secs);
            return Ok(report.aborted.is_none());
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let dataset = Dataset::load(&data)?;
            let map = evaluate(&ckpt.model.detector, &ckpt.config.detector, &dataset.target_test)?;
            println!("target mAP@0.5 {map:.4} over {} images", dataset.target_test.len());
        }
        Command::Ablate { config, variants, seeds, seed_base, out, data } => {
            let cfg = load_config(config.as_deref(), data)?;
            let variants = parse_variants(&variants)?;
            let dataset = cfg.dataset()?;
            let table = ablate(&cfg, &dataset, &variants, &seed_range(seed_base, seeds), |v, seed, r| {
                println!("{v:<12} seed {seed:>3}  final mAP {:.4}  {:.1}s", r.final_map, r.wall_clock_secs);
            })?;
            let csv = table.to_csv();
            fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            print!("{csv}");
        }
        Command::Selfcheck => {
            let outcomes = selfcheck::run_all();
            for o in &outcomes {
                println!("{o}");
            }
            return Ok(outcomes.iter().all(|o| o.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
