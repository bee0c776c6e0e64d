use std::path::PathBuf;

use clap::Parser;
use lc_core::imgio::{write_image, write_labels, write_manifest, ManifestEntry};
use lc_core::{gen_sample, LcError, Result};

use super::Ctx;

#[derive(Parser, Debug)]
pub struct Args {
    /// Output directory (train/ and val/ subdirectories are created).
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 2000)]
    pub train_count: usize,

    #[arg(long, default_value_t = 200)]
    pub val_count: usize,

    /// Square image size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,

    #[arg(long, default_value_t = 4)]
    pub classes: usize,

    /// Probability that a boundary pixel is labeled ignore (255).
    #[arg(long, default_value_t = 0.15)]
    pub ambiguity: f64,

    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    if args.classes < 2 {
        return Err(LcError::config("need at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&args.ambiguity) {
        return Err(LcError::config("ambiguity must be in [0, 1]"));
    }
    let seed = ctx.seed.unwrap_or(args.data_seed);

    // val samples continue the index stream so the two splits never overlap
    let splits = [
        ("train", 0u64, args.train_count),
        ("val", args.train_count as u64, args.val_count),
    ];
    for (split, base, count) in splits {
        let dir = args.out.join(split);
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("labels"))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let sample = gen_sample(base + i as u64, args.size, args.classes, seed, args.ambiguity);
            let image_path = format!("images/{i:05}.ppm");
            let label_path = format!("labels/{i:05}.pgm");
            write_image(&dir.join(&image_path), &sample.image)?;
            write_labels(&dir.join(&label_path), &sample.labels)?;
            entries.push(ManifestEntry {
                image_path,
                label_path,
            });
        }
        write_manifest(&dir.join("manifest.json"), &entries)?;
        println!("{split}: {count} samples under {}", dir.display());
    }
    Ok(())
}
