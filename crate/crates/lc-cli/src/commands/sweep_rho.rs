use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use lc_core::checkpoint::load_model;
use lc_core::imgio::load_manifest_dataset;
use lc_core::metrics::{miou, ConfusionMatrix};
use lc_core::{infer, prepare_pairs, LcError, Result};

use super::Ctx;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
pub struct Args {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long)]
    pub config: PathBuf,

    /// Dataset directory with val/manifest.json.
    #[arg(long)]
    pub data: PathBuf,

    /// Comma-separated thresholds, e.g. "1.0,0.995,0.985,0.97".
    #[arg(long, default_value = "1.0,0.995,0.985,0.970,0.950,0.930,0.900,0.800")]
    pub rhos: String,

    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let (model, _, _, _) = load_model::<f32>(&args.checkpoint, &cfg.backbone)?;
    let manifest = args.data.join("val").join("manifest.json");
    let pairs = load_manifest_dataset::<f32>(&manifest)?;
    if pairs.is_empty() {
        return Err(LcError::config("validation set is empty"));
    }
    let items = prepare_pairs(&pairs, &model)?;

    let rhos: Vec<f64> = args
        .rhos
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| LcError::config(format!("bad rho value '{s}'")))
        })
        .collect::<Result<_>>()?;

    let stage_count = model.stage_count();
    let mut csv = String::from("rho");
    for k in 1..=stage_count {
        csv.push_str(&format!(",exit_s{k}_pct"));
    }
    csv.push_str(",miou,flops,ms_per_image\n");

    for &rho in &rhos {
        let mut confusion = ConfusionMatrix::new(model.class_count);
        let mut exit_sums = vec![0.0f64; stage_count];
        let mut flops = 0u64;
        let start = Instant::now();
        for item in &items {
            let out = infer(&item.image, &model, Some(rho), ctx.mode)?;
            confusion.add_maps(&item.labels, &out.labels);
            for (a, f) in exit_sums.iter_mut().zip(out.exit_fractions()) {
                *a += f;
            }
            flops += out.ledger.total_flops();
        }
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        let (_, mean_iou) = miou(&confusion)?;
        let n = items.len() as f64;

        csv.push_str(&format!("{rho}"));
        for s in &exit_sums {
            csv.push_str(&format!(",{:.2}", s / n * 100.0));
        }
        let ms = if ctx.deterministic { 0.0 } else { elapsed_ms / n };
        csv.push_str(&format!(",{:.4},{},{:.3}\n", mean_iou, flops / items.len() as u64, ms));
        println!(
            "rho {rho}: exits {} | mIoU {:.4}",
            exit_sums
                .iter()
                .map(|s| format!("{:.1}%", s / n * 100.0))
                .collect::<Vec<_>>()
                .join("/"),
            mean_iou
        );
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, csv)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
