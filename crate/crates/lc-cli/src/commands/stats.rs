use std::path::PathBuf;

use clap::Parser;
use lc_core::checkpoint::load_model;
use lc_core::imgio::load_manifest_dataset;
use lc_core::metrics::{boundary_hits, difficulty_partition_scored, stage_stats};
use lc_core::{infer, prepare_pairs, LcError, RegionMask, Result};

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

    /// Output directory for difficulty.csv and stage_stats.csv.
    #[arg(long)]
    pub out: PathBuf,

    /// Confidence level separating easy/hard from moderate pixels.
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,

    /// Chebyshev radius defining "near a boundary".
    #[arg(long, default_value_t = 2)]
    pub radius: usize,

    #[arg(long)]
    pub rho: Option<f64>,
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
    std::fs::create_dir_all(&args.out)?;

    let k = model.class_count;
    let stages = model.stage_count();
    let mut set_counts = [0u64; 3]; // es, ms, hs
    let mut evaluated = 0u64;
    let mut hs_boundary = (0u64, 0u64);
    let mut all_boundary = (0u64, 0u64);
    let mut processed = vec![vec![0u64; k]; stages];
    let mut exited = vec![vec![0u64; k]; stages];

    for item in &items {
        let out = infer(&item.image, &model, args.rho, ctx.mode)?;
        let (h, w) = out.labels.dims();
        let conf = out.merged_confidence();
        let part = difficulty_partition_scored(&conf, &out.labels, &item.labels, args.threshold);
        set_counts[0] += part.es.active_count() as u64;
        set_counts[1] += part.ms.active_count() as u64;
        set_counts[2] += part.hs.active_count() as u64;
        evaluated += (part.es.active_count() + part.ms.active_count() + part.hs.active_count())
            as u64;

        let (hits, total) = boundary_hits(&part.hs, &item.labels, args.radius);
        hs_boundary.0 += hits;
        hs_boundary.1 += total;
        // all evaluated pixels = union of the three sets
        let mut all = RegionMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if part.es.get(y, x) || part.ms.get(y, x) || part.hs.get(y, x) {
                    all.set(y, x, true);
                }
            }
        }
        let (hits, total) = boundary_hits(&all, &item.labels, args.radius);
        all_boundary.0 += hits;
        all_boundary.1 += total;

        let masks: Vec<RegionMask> = out.predictions.iter().map(|p| p.exit_mask.clone()).collect();
        let st = stage_stats(&masks, &item.labels, k);
        for s in 0..stages {
            for c in 0..k {
                processed[s][c] += st.processed[s][c];
                exited[s][c] += st.exited[s][c];
            }
        }
    }

    let frac = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let mut difficulty = String::from("set,pixels,fraction,boundary_fraction\n");
    let names = ["es", "ms", "hs"];
    for (i, name) in names.iter().enumerate() {
        let bf = match i {
            2 => frac(hs_boundary.0, hs_boundary.1),
            _ => f64::NAN,
        };
        if bf.is_nan() {
            difficulty.push_str(&format!(
                "{name},{},{:.6},\n",
                set_counts[i],
                frac(set_counts[i], evaluated)
            ));
        } else {
            difficulty.push_str(&format!(
                "{name},{},{:.6},{:.6}\n",
                set_counts[i],
                frac(set_counts[i], evaluated),
                bf
            ));
        }
    }
    difficulty.push_str(&format!(
        "all,{},1.000000,{:.6}\n",
        evaluated,
        frac(all_boundary.0, all_boundary.1)
    ));
    std::fs::write(args.out.join("difficulty.csv"), &difficulty)?;

    let mut st_csv = String::from("class");
    for s in 1..=stages {
        st_csv.push_str(&format!(",processed_s{s},exited_s{s}"));
    }
    for s in 1..stages {
        st_csv.push_str(&format!(",ratio_s{}_{}", s + 1, s));
    }
    st_csv.push('\n');
    for c in 0..k {
        st_csv.push_str(&format!("{c}"));
        for s in 0..stages {
            st_csv.push_str(&format!(",{},{}", processed[s][c], exited[s][c]));
        }
        for s in 0..stages - 1 {
            if processed[s][c] == 0 {
                st_csv.push(',');
            } else {
                st_csv.push_str(&format!(
                    ",{:.4}",
                    processed[s + 1][c] as f64 / processed[s][c] as f64
                ));
            }
        }
        st_csv.push('\n');
    }
    std::fs::write(args.out.join("stage_stats.csv"), &st_csv)?;

    println!(
        "es/ms/hs fractions: {:.3} / {:.3} / {:.3}",
        frac(set_counts[0], evaluated),
        frac(set_counts[1], evaluated),
        frac(set_counts[2], evaluated)
    );
    println!(
        "boundary fraction (radius {}): hs {:.3} vs all {:.3}",
        args.radius,
        frac(hs_boundary.0, hs_boundary.1),
        frac(all_boundary.0, all_boundary.1)
    );
    Ok(())
}
