use std::path::PathBuf;

use clap::Parser;
use lc_core::checkpoint::load_model;
use lc_core::imgio::{read_image, write_colormap, write_labels, write_mask};
use lc_core::{infer, LcError, Result};

use super::Ctx;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
pub struct Args {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Run config the checkpoint was trained with.
    #[arg(long)]
    pub config: PathBuf,

    /// Input PPM image(s).
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,

    /// Confidence threshold override.
    #[arg(long)]
    pub rho: Option<f64>,

    /// Write label maps at input resolution instead of prediction
    /// resolution.
    #[arg(long)]
    pub full_res: bool,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let (model, _, _, _) = load_model::<f32>(&args.checkpoint, &cfg.backbone)?;
    std::fs::create_dir_all(&args.out)?;

    for image_path in &args.image {
        let stem = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| LcError::config(format!("bad image path {}", image_path.display())))?;
        let image = read_image::<f32>(image_path)?;
        let mut out = infer(&image, &model, args.rho, ctx.mode)?;
        if ctx.deterministic {
            // wall times are not reproducible; zero them in bit-exact mode
            for s in out.ledger.stages.iter_mut() {
                s.wall_time_s = 0.0;
            }
        }

        let labels = if args.full_res {
            &out.labels_full
        } else {
            &out.labels
        };
        write_labels(&args.out.join(format!("{stem}_labels.pgm")), labels)?;
        write_colormap(&args.out.join(format!("{stem}_color.ppm")), labels)?;
        for (k, pred) in out.predictions.iter().enumerate() {
            write_mask(
                &args.out.join(format!("{stem}_exit_s{}.ppm", k + 1)),
                &pred.exit_mask,
            )?;
        }
        let ledger_json = serde_json::to_string_pretty(&out.ledger)?;
        std::fs::write(args.out.join(format!("{stem}_ledger.json")), ledger_json)?;

        let fractions = out
            .exit_fractions()
            .iter()
            .map(|f| format!("{:.1}%", f * 100.0))
            .collect::<Vec<_>>()
            .join(" / ");
        println!(
            "{}: exits {} | {} flops",
            stem,
            fractions,
            out.ledger.total_flops()
        );
    }
    Ok(())
}
