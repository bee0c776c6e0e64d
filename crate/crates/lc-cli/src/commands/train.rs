use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use lc_core::checkpoint::{load_model, save_model, TrainPhase};
use lc_core::imgio::load_manifest_dataset;
use lc_core::{
    build_model, cascade_train, initial_train, mc_baseline_train, prepare_pairs, train_dsn,
    train_dsn_dropout, train_lc, CascadeModel, CheckpointCadence, LcError, Result, TrainItem,
    TrainReport,
};

use super::Ctx;
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Phase {
    Initial,
    Cascade,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Layer cascade: initial + cascade training (the default).
    Lc,
    /// Model cascade: stages trained separately, predecessors frozen.
    Mc,
    /// Deeply supervised baseline: rho = 1.0, no routing.
    Dsn,
    /// DSN plus random label dropout at the cascade's measured drop rates.
    Dropout,
}

#[derive(Parser, Debug)]
pub struct Args {
    /// JSON run config; flags below override individual fields.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Dataset directory containing train/manifest.json (and optionally
    /// val/manifest.json).
    #[arg(long)]
    pub data: Option<PathBuf>,

    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Phase::Both)]
    pub phase: Phase,

    #[arg(long, value_enum, default_value_t = Baseline::Lc)]
    pub baseline: Baseline,

    /// Resume from a checkpoint (required for --phase cascade).
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Write a checkpoint every N epochs (0 = only the final one).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,

    // config overrides
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub epochs_initial: Option<usize>,
    #[arg(long)]
    pub epochs_cascade: Option<usize>,
    #[arg(long)]
    pub class_count: Option<usize>,
}

fn apply_overrides(cfg: &mut RunConfig, args: &Args, ctx: &Ctx) {
    if let Some(rho) = args.rho {
        cfg.set_rho(rho);
    }
    if let Some(seed) = ctx.seed {
        cfg.set_seed(seed);
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr_initial {
        cfg.train.lr_initial = v;
    }
    if let Some(v) = args.epochs_initial {
        cfg.train.epochs_initial = v;
    }
    if let Some(v) = args.epochs_cascade {
        cfg.train.epochs_cascade = v;
    }
    if let Some(v) = args.class_count {
        cfg.backbone.class_count = v;
    }
    if let Some(d) = &args.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
}

fn load_items(
    dir: &std::path::Path,
    split: &str,
    model: &CascadeModel<f32>,
) -> Result<Vec<TrainItem<f32>>> {
    let manifest = dir.join(split).join("manifest.json");
    if !manifest.exists() {
        return Ok(Vec::new());
    }
    let pairs = load_manifest_dataset::<f32>(&manifest)?;
    prepare_pairs(&pairs, model)
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &args, ctx);

    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| LcError::config("no dataset: set --data or data_dir in the config"))?;
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| LcError::config("no output dir: set --out or out_dir in the config"))?;
    std::fs::create_dir_all(&out_dir)?;

    let mut model: CascadeModel<f32> = match &args.resume {
        Some(path) => load_model::<f32>(path, &cfg.backbone)?.0,
        None => build_model(&cfg.backbone)?,
    };
    if args.phase == Phase::Cascade && args.resume.is_none() {
        return Err(LcError::config(
            "--phase cascade needs --resume with a checkpoint from initial training",
        ));
    }

    let train_items = load_items(&data_dir, "train", &model)?;
    if train_items.is_empty() {
        return Err(LcError::config(format!(
            "no training data under {}",
            data_dir.join("train").display()
        )));
    }
    let val_items = load_items(&data_dir, "val", &model)?;

    cfg.save(&out_dir.join("config.json"))?;

    let cadence = (args.checkpoint_every > 0).then(|| CheckpointCadence {
        dir: out_dir.clone(),
        every: args.checkpoint_every,
    });

    let report: TrainReport = match (args.baseline, args.phase) {
        (Baseline::Mc, _) => mc_baseline_train(
            &mut model,
            &train_items,
            &val_items,
            &cfg.train,
            ctx.mode,
            cadence.as_ref(),
        )?,
        (Baseline::Dsn, _) => train_dsn(
            &mut model,
            &train_items,
            &val_items,
            &cfg.train,
            ctx.mode,
            cadence.as_ref(),
        )?,
        (Baseline::Dropout, _) => train_dsn_dropout(
            &mut model,
            &train_items,
            &val_items,
            &cfg.train,
            ctx.mode,
            cadence.as_ref(),
        )?,
        (Baseline::Lc, Phase::Initial) => initial_train(
            &mut model,
            &train_items,
            &val_items,
            &cfg.train,
            ctx.mode,
            cadence.as_ref(),
        )?,
        (Baseline::Lc, Phase::Cascade) => cascade_train(
            &mut model,
            &train_items,
            &val_items,
            &cfg.train,
            ctx.mode,
            cadence.as_ref(),
            false,
        )?,
        (Baseline::Lc, Phase::Both) => train_lc(
            &mut model,
            &train_items,
            &val_items,
            &cfg.train,
            ctx.mode,
            cadence.as_ref(),
        )?,
    };

    std::fs::write(out_dir.join("report.csv"), report.csv())?;
    let phase = model.trained_phase.unwrap_or(TrainPhase::Initial);
    let epochs = report.rows.len() as u32;
    save_model(&out_dir.join("final.lckp"), &model, phase, epochs, None)?;

    if let Some(last) = report.rows.last() {
        println!(
            "done: {} epochs, final val mIoU {:.4} (report.csv, final.lckp in {})",
            report.rows.len(),
            last.miou_val,
            out_dir.display()
        );
    }
    Ok(())
}
