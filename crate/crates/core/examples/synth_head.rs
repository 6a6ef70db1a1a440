//! Renders the synthetic head from a few yaw angles and writes each view
//! (color, depth, normals, mask, camera) to a scene directory.
//!
//! Usage: `cargo run --release --example synth_head [out_dir]`

use std::path::PathBuf;

use splathead::camera::yaw_camera;
use splathead::geom::Vec3;
use splathead::io;
use splathead::pipeline::SourceView;
use splathead::synth::{synth_scene, SynthConfig};

fn main() -> splathead::error::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    let cfg = SynthConfig::default();
    let base = cfg.frontal_camera()?;
    for yaw in [-40.0, 0.0, 40.0] {
        let view = synth_scene(&cfg, &yaw_camera(&base, yaw, &Vec3::zeros())?)?;
        let covered = view.mask.data().iter().filter(|m| **m > 0.5).count();
        let dir = out.join(format!("yaw_{yaw}"));
        io::write_scene(&dir, &SourceView::from(&view))?;
        println!("yaw {yaw:>5}: {covered} head pixels -> {}", dir.display());
    }
    Ok(())
}
