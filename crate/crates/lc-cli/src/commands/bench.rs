use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use lc_core::{
    conv2d_forward, flop_count, region_conv_forward, ConvSpec, LcError, RegionMask, Result,
    Shape4, Tensor,
};
use rand::SeedableRng;

use super::Ctx;

#[derive(Parser, Debug)]
pub struct Args {
    /// Square feature-map size.
    #[arg(long, default_value_t = 128)]
    pub size: usize,

    #[arg(long, default_value_t = 64)]
    pub in_channels: usize,

    #[arg(long, default_value_t = 64)]
    pub out_channels: usize,

    #[arg(long, default_value_t = 3)]
    pub kernel: usize,

    /// Comma-separated active-pixel densities.
    #[arg(long, default_value = "0.25,0.5,0.75,1.0")]
    pub densities: String,

    #[arg(long, default_value_t = 20)]
    pub repeats: usize,

    /// Output CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Median wall times of dense vs region convolution at each density,
/// interleaving runs so background load hits both sides equally.
pub fn measure(
    size: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    densities: &[f64],
    repeats: usize,
    mode: lc_core::ExecMode,
) -> Result<Vec<BenchRow>> {
    let pad = kernel / 2;
    let spec = ConvSpec::new(in_channels, out_channels, (kernel, kernel)).with_padding(pad);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
    let x: Tensor<f32> = Tensor::randn(Shape4::new(1, in_channels, size, size), 1.0, &mut rng);
    let w: Tensor<f32> = Tensor::randn(spec.weight_shape(), 0.1, &mut rng);

    let mut rows = Vec::new();
    for &density in densities {
        if !(0.0..=1.0).contains(&density) {
            return Err(LcError::config(format!("density {density} out of range")));
        }
        // deterministic mask with the exact requested count, striped so the
        // active pixels are spread realistically
        let target = ((size * size) as f64 * density).round() as usize;
        let mut mask = RegionMask::empty(size, size);
        let mut placed = 0usize;
        let mut idx = 0usize;
        let stride_hash = 2654435761u64;
        while placed < target {
            let pos = ((idx as u64).wrapping_mul(stride_hash) % (size * size) as u64) as usize;
            let (y, xcol) = (pos / size, pos % size);
            if !mask.get(y, xcol) {
                mask.set(y, xcol, true);
                placed += 1;
            }
            idx += 1;
        }

        let mut dense_t = Vec::with_capacity(repeats);
        let mut rc_t = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            let d = conv2d_forward(&x, &spec, &w, None, mode)?;
            dense_t.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(d);

            let t = Instant::now();
            let r = region_conv_forward(&x, &mask, &spec, &w, None, mode)?;
            rc_t.push(t.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(r);
        }
        let dense_ms = median(dense_t);
        let rc_ms = median(rc_t);
        rows.push(BenchRow {
            density,
            dense_ms,
            rc_ms,
            speedup: dense_ms / rc_ms,
            flops: flop_count(&spec, mask.active_count()),
            dense_flops: flop_count(&spec, size * size),
        });
    }
    Ok(rows)
}

pub struct BenchRow {
    pub density: f64,
    pub dense_ms: f64,
    pub rc_ms: f64,
    pub speedup: f64,
    pub flops: u64,
    pub dense_flops: u64,
}

pub fn run(args: Args, ctx: &Ctx) -> Result<()> {
    let densities: Vec<f64> = args
        .densities
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| LcError::config(format!("bad density '{s}'")))
        })
        .collect::<Result<_>>()?;

    let rows = measure(
        args.size,
        args.in_channels,
        args.out_channels,
        args.kernel,
        &densities,
        args.repeats,
        ctx.mode,
    )?;

    let mut csv = String::from("density,dense_ms,rc_ms,speedup,flops,dense_flops\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:.3},{:.3},{:.3},{},{}\n",
            r.density, r.dense_ms, r.rc_ms, r.speedup, r.flops, r.dense_flops
        ));
        println!(
            "density {:.2}: dense {:.2} ms, rc {:.2} ms, speedup {:.2}x, {} flops",
            r.density, r.dense_ms, r.rc_ms, r.speedup, r.flops
        );
    }
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(out, csv)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
