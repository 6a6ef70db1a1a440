//! Reconstructs a head from a profile view, mirrors it across the symmetry
//! plane and filters the mirrored points, for several yaw angles.
//!
//! Usage: `cargo run --release --example mirror_filter [out_dir]`

use std::path::PathBuf;

use splathead::camera::yaw_camera;
use splathead::geom::Vec3;
use splathead::io;
use splathead::pipeline::{self, PipelineConfig, SourceView};
use splathead::synth::synth_scene;

fn main() -> splathead::error::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from);
    let cfg = PipelineConfig::default();
    let base = cfg.base_camera()?;
    for yaw in [0.0, 20.0, 40.0, 60.0] {
        let view = synth_scene(&cfg.synth, &yaw_camera(&base, yaw, &Vec3::zeros())?)?;
        let surface = pipeline::reconstruct_surface(&SourceView::from(&view), &cfg, None)?;
        let (mirrored, r) = pipeline::complete(&surface.points, &cfg)?;
        println!(
            "yaw {yaw:>4}: {} visible, {} mirrored, {} adjacent, {} occluding, {} kept (voxel {:.4})",
            surface.points.valid_count(),
            r.mirrored_in,
            r.removed_adjacent,
            r.removed_occluding,
            r.survivors,
            r.voxel_size
        );
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
            io::write_grid_ply(&dir.join(format!("visible_{yaw}.ply")), &surface.points)?;
            io::write_grid_ply(&dir.join(format!("mirrored_{yaw}.ply")), &mirrored)?;
        }
    }
    Ok(())
}
