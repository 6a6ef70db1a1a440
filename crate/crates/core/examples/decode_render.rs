//! Decodes Gaussians from a profile view plus its mirrored completion and
//! renders an orbit, composited over a gray background.
//!
//! Usage: `cargo run --release --example decode_render [out_dir] [yaw]`

use std::path::PathBuf;

use splathead::camera::yaw_camera;
use splathead::gaussians::Provenance;
use splathead::geom::{GeomImage, ImageKind, Vec3};
use splathead::io;
use splathead::pipeline::{self, PipelineConfig, SourceView};
use splathead::synth::synth_scene;

fn main() -> splathead::error::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "decode_out".into()));
    let yaw: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30.0);
    let cfg = PipelineConfig::default();
    let base = cfg.base_camera()?;
    let view = synth_scene(&cfg.synth, &yaw_camera(&base, yaw, &Vec3::zeros())?)?;

    let surface = pipeline::reconstruct_surface(&SourceView::from(&view), &cfg, None)?;
    let (mirrored, _) = pipeline::complete(&surface.points, &cfg)?;
    let bundle = pipeline::initial_bundle(&surface.points, &cfg)?;
    let inputs = pipeline::decoder_inputs(&surface, Some(&mirrored), &bundle, &cfg)?;
    let cloud = pipeline::decode(&bundle, &inputs)?;
    println!(
        "{} Gaussians ({} visible, {} symmetric)",
        cloud.len(),
        cloud.count(Provenance::Visible),
        cloud.count(Provenance::Symmetric)
    );

    std::fs::create_dir_all(&out)?;
    io::write_gaussian_ply(&out.join("gaussians.ply"), &cloud)?;
    let gray = GeomImage::from_data(view.color.width(), view.color.height(), 3, ImageKind::Color, vec![0.5; view.color.data().len()])?;
    let t = std::time::Instant::now();
    let frames = pipeline::render_yaws(&cloud, &base, &[-60.0, -30.0, 0.0, 30.0, 60.0], &cfg.render)?;
    println!("5 frames in {:.2} s", t.elapsed().as_secs_f64());
    for (yaw, _, frame) in frames {
        let path = out.join(format!("frame_{}.png", pipeline::yaw_tag(yaw)));
        io::write_png(&path, &pipeline::composite_over(&frame, &gray)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
