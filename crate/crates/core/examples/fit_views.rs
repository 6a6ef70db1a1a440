//! Fits the colors and opacities of a decoded head to three synthetic views
//! and reports PSNR before and after.
//!
//! Usage: `cargo run --release --example fit_views [steps] [lr] [lr_final] [momentum]`

use splathead::fit::{fit_gaussians, psnr, LossConfig, TargetView};
use splathead::pipeline::{self, PipelineConfig, SourceView};
use splathead::renderer::render;
use splathead::synth::{synth_scene, SynthConfig};
use splathead::camera::yaw_camera;
use splathead::geom::Vec3;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> splathead::error::Result<()> {
    let loss = LossConfig {
        steps: arg(1, 500),
        learning_rate: arg(2, 0.05),
        learning_rate_final: arg(3, 0.005),
        momentum: arg(4, 0.9),
        ..LossConfig::default()
    };

    // targets at 128x128, source grid at 64x64
    let scene = SynthConfig::default();
    let base = scene.frontal_camera()?;
    let targets = [-30.0, 0.0, 30.0]
        .iter()
        .map(|yaw| {
            let camera = yaw_camera(&base, *yaw, &Vec3::zeros())?;
            let image = synth_scene(&scene, &camera)?.color;
            Ok(TargetView { camera, image })
        })
        .collect::<splathead::error::Result<Vec<_>>>()?;

    let mut cfg = PipelineConfig::default();
    cfg.synth.width = 64;
    cfg.synth.height = 64;
    cfg.synth.focal = scene.focal / 2.0;
    let source = synth_scene(&cfg.synth, &cfg.synth.frontal_camera()?)?;
    let surface = pipeline::reconstruct_surface(&SourceView::from(&source), &cfg, None)?;
    let bundle = pipeline::initial_bundle(&surface.points, &cfg)?;
    let inputs = pipeline::decoder_inputs(&surface, None, &bundle, &cfg)?;
    let init = pipeline::decode(&bundle, &inputs)?;
    println!("{} Gaussians, {} steps", init.len(), loss.steps);

    let t = std::time::Instant::now();
    let fit = fit_gaussians(&init, &targets, &loss, &cfg.render)?;
    println!("fit took {:.1} s", t.elapsed().as_secs_f64());
    for view in &targets {
        let before = psnr(&render(&init, &view.camera, &cfg.render)?.color, &view.image)?;
        let after = psnr(&render(&fit.cloud, &view.camera, &cfg.render)?.color, &view.image)?;
        println!("view: PSNR {before:.2} dB -> {after:.2} dB");
    }
    for r in fit.trace.iter().step_by((loss.steps / 10).max(1)) {
        println!("step {:4}: loss {:.5}", r.step, r.total);
    }
    Ok(())
}
