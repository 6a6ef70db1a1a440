//! Integrates the normals of a synthetic frontal view into depth, comparing
//! discontinuity-aware weights against uniform weights.
//!
//! Usage: `cargo run --release --example normal_integration [k]`

use splathead::error::Result;
use splathead::geom::GeomImage;
use splathead::pipeline::PipelineConfig;
use splathead::surface_recon::{integrate_normals_perspective, reconstruct};
use splathead::synth::synth_frontal;

fn depth_rmse(a: &GeomImage, b: &GeomImage, mask: &GeomImage) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, m) in mask.data().iter().enumerate() {
        if *m > 0.5 {
            sum += (a.data()[i] - b.data()[i]).powi(2);
            n += 1;
        }
    }
    (sum / n.max(1) as f64).sqrt()
}

fn main() -> Result<()> {
    let mut cfg = PipelineConfig::default();
    if let Some(k) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.bini.k = k;
    }
    let view = synth_frontal(&cfg.synth)?;

    // coarse anchor: the true depth blurred into a constant per row
    let mut anchor = view.depth.clone();
    let (w, h) = (anchor.width(), anchor.height());
    for y in 0..h {
        let row: Vec<f64> = (0..w).filter(|x| view.mask.get(*x, y, 0) > 0.5).map(|x| view.depth.get(x, y, 0)).collect();
        let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
        for x in 0..w {
            anchor.set(x, y, 0, mean);
        }
    }

    let rec = reconstruct(&anchor, &view.normal, &view.mask, &view.camera, &cfg.bini)?;
    let mut flat = cfg.bini.clone();
    flat.k = 1e-9;
    let uniform = integrate_normals_perspective(&anchor, &view.normal, &view.mask, &view.camera, &flat)?;

    println!("anchor rmse     {:.4}", depth_rmse(&anchor, &view.depth, &view.mask));
    println!("bilateral rmse  {:.4}", depth_rmse(&rec.integration.depth, &view.depth, &view.mask));
    println!("near-uniform    {:.4}", depth_rmse(&uniform.depth, &view.depth, &view.mask));
    println!("{} points back-projected", rec.cloud.valid_count());
    let trace = &rec.integration.objective_trace;
    println!("energy {:.6} -> {:.6} over {} irls iterations", trace[0], trace[trace.len() - 1], trace.len() - 1);
    Ok(())
}
