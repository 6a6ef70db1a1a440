//! Writes a decoded cloud, a depth map, a checkpoint and a config to disk,
//! reads them back and checks that nothing changed.
//!
//! Usage: `cargo run --release --example io_roundtrip [dir]`

use std::path::PathBuf;

use splathead::geom::ImageKind;
use splathead::io;
use splathead::pipeline::{self, PipelineConfig, SourceView};
use splathead::synth::synth_frontal;

fn main() -> splathead::error::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "io_out".into()));
    std::fs::create_dir_all(&dir)?;
    let mut cfg = PipelineConfig::default();
    cfg.synth.width = 64;
    cfg.synth.height = 64;
    cfg.synth.focal /= 2.0;
    let view = synth_frontal(&cfg.synth)?;
    let surface = pipeline::reconstruct_surface(&SourceView::from(&view), &cfg, None)?;
    let bundle = pipeline::initial_bundle(&surface.points, &cfg)?;
    let cloud = pipeline::decode(&bundle, &pipeline::decoder_inputs(&surface, None, &bundle, &cfg)?)?;

    io::write_pfm(&dir.join("depth.pfm"), &view.depth)?;
    let depth = io::read_pfm(&dir.join("depth.pfm"), ImageKind::Depth)?;
    let same = depth.data().iter().zip(view.depth.data()).all(|(a, b)| *a == (*b as f32) as f64);
    println!("depth pfm: f32-exact {same}");

    io::write_gaussian_ply(&dir.join("gaussians.ply"), &cloud)?;
    let back = io::read_gaussian_ply(&dir.join("gaussians.ply"))?;
    println!("gaussian ply: {} -> {} Gaussians", cloud.len(), back.len());

    io::write_grid_ply(&dir.join("points.ply"), &surface.points)?;
    println!("grid ply: identical {}", io::read_grid_ply(&dir.join("points.ply"))? == surface.points);

    io::write_checkpoint(&dir.join("checkpoint.bin"), &bundle)?;
    let restored = io::read_checkpoint(&dir.join("checkpoint.bin"))?;
    println!("checkpoint: identical bytes {}", io::encode_checkpoint(&restored)? == io::encode_checkpoint(&bundle)?);

    io::write_json(&dir.join("config.json"), &cfg)?;
    let loaded: PipelineConfig = io::read_json(&dir.join("config.json"))?;
    println!("config: identical {}", loaded == cfg);
    Ok(())
}
