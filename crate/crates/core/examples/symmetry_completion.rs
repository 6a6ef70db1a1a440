//! Reconstructs a head from a 40 degree profile view, trains the decoders on
//! that view with and without the mirrored completion, and compares both on
//! the opposite profile, restricted to the half the source camera never saw.
//!
//! Usage: `cargo run --release --example symmetry_completion [steps] [learning_rate]`

use splathead::camera::yaw_camera;
use splathead::error::Result;
use splathead::fit::{fit_pipeline, psnr_masked, TargetView};
use splathead::geom::Vec3;
use splathead::pipeline::{self, PipelineConfig, SourceView};
use splathead::renderer::render;
use splathead::synth::synth_scene;

fn main() -> Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.loss.steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    if let Some(lr) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        cfg.loss.learning_rate = lr;
        cfg.loss.learning_rate_final = lr / 10.0;
    }
    let base = cfg.base_camera()?;
    let source = synth_scene(&cfg.synth, &yaw_camera(&base, 40.0, &Vec3::zeros())?)?;
    let novel = synth_scene(&cfg.synth, &yaw_camera(&base, -40.0, &Vec3::zeros())?)?;
    let hidden: Vec<bool> = novel.hits.iter().map(|h| matches!(h, Some(p) if p.x > 0.0)).collect();

    let surface = pipeline::reconstruct_surface(&SourceView::from(&source), &cfg, None)?;
    let (mirrored, report) = pipeline::complete(&surface.points, &cfg)?;
    println!("{} visible points, {} mirrored survivors", surface.points.valid_count(), report.survivors);
    let targets = [TargetView { camera: source.camera.clone(), image: source.color.clone() }];

    for (label, completion) in [("with symmetry", Some(&mirrored)), ("without symmetry", None)] {
        let bundle = pipeline::initial_bundle(&surface.points, &cfg)?;
        let inputs = pipeline::decoder_inputs(&surface, completion, &bundle, &cfg)?;
        let fit = fit_pipeline(&bundle, &inputs, &targets, &cfg.loss, &cfg.render)?;
        let frame = render(&fit.cloud, &novel.camera, &cfg.render)?;
        let score = psnr_masked(&frame.color, &novel.color, &hidden)?;
        let first = fit.trace.first().map_or(0.0, |r| r.total);
        let last = fit.trace.last().map_or(0.0, |r| r.total);
        println!("{label}: loss {first:.4} -> {last:.4}, hidden-half PSNR {score:.2} dB");
    }
    Ok(())
}
