//! Command-line front end: one pipeline stage per subcommand.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use splathead::camera::yaw_camera;
use splathead::error::{Error, Result};
use splathead::fit::{fit_gaussians, fit_pipeline, psnr, ssim, write_trace_csv, LossRecord, PipelineInputs, TargetView};
use splathead::gaussians::{GaussianCloud, Provenance};
use splathead::geom::{GridPointCloud, ImageKind, Vec3};
use splathead::io;
use splathead::pipeline::{self, PipelineConfig, SourceView};
use splathead::regressors::{identity_features, refine_geometry, RegressorBundle};
use splathead::surface_recon::reconstruct;
use splathead::synth::synth_scene;

#[derive(Parser)]
#[command(name = "splathead", version, about = "Symmetric Gaussian head reconstruction and rendering")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every randomized component (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic head scene bundle.
    Synth {
        /// Camera yaw in degrees around the head center.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        yaw: f64,
    },
    /// Integrate normals into a grid point cloud.
    Recon {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        normal: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// Color image; needed for refinement with a checkpoint.
        #[arg(long)]
        color: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mirror a point cloud and filter the copy.
    Mirror {
        #[arg(long)]
        points: PathBuf,
    },
    /// Drive and decode point sets into Gaussians.
    Decode {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        mirrored: Option<PathBuf>,
        #[arg(long)]
        color: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render Gaussians from yawed cameras.
    Render {
        #[arg(long)]
        gaussians: PathBuf,
        /// Base camera JSON; defaults to the configured camera.
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Comma-separated yaw angles in degrees.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        yaw: Vec<f64>,
        /// Background composited behind the render.
        #[arg(long)]
        composite: Option<PathBuf>,
    },
    /// Optimize Gaussians (with --gaussians) or the decoders against scene bundles.
    Fit {
        /// Scene directories written by `synth`; the first is the source view.
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        gaussians: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decode without the mirrored completion.
        #[arg(long)]
        no_symmetry: bool,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// PSNR and SSIM between two images.
    Eval { a: PathBuf, b: PathBuf },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => io::read_json::<PipelineConfig>(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SPLATHEAD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("SPLATHEAD_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

fn bundle_or_prior(checkpoint: Option<&Path>, points: &GridPointCloud, cfg: &PipelineConfig) -> Result<RegressorBundle> {
    match checkpoint {
        Some(p) => io::read_checkpoint(p),
        None => pipeline::initial_bundle(points, cfg),
    }
}

fn write_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    write_trace_csv(std::fs::File::create(path)?, trace)
}

fn provenance_counts(cloud: &GaussianCloud) -> serde_json::Value {
    json!({
        "total": cloud.len(),
        "visible": cloud.count(Provenance::Visible),
        "symmetric": cloud.count(Provenance::Symmetric),
        "child": cloud.count(Provenance::Child),
    })
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out_dir;
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::Synth { yaw } => {
            let camera = yaw_camera(&cfg.base_camera()?, yaw, &Vec3::zeros())?;
            let view = synth_scene(&cfg.synth, &camera)?;
            io::write_scene(out, &SourceView::from(&view))?;
            log::info!("synth: {} foreground pixels", view.mask.count_set());
        }
        Command::Recon { depth, normal, mask, camera, color, checkpoint } => {
            let camera = io::read_camera(&camera)?;
            let depth = io::read_pfm(&depth, ImageKind::Depth)?;
            let normal = io::read_pfm(&normal, ImageKind::Normal)?;
            let mask = io::read_pfm(&mask, ImageKind::Mask)?;
            let rec = reconstruct(&depth, &normal, &mask, &camera, &cfg.bini)?;
            let points = match (&checkpoint, &color) {
                (Some(ck), Some(color)) => {
                    let features = identity_features(&io::read_image(color)?)?;
                    refine_geometry(&rec.cloud, &features, &io::read_checkpoint(ck)?.refine)?
                }
                (Some(_), None) => return Err(Error::InvalidInput("refinement with --checkpoint needs --color".into())),
                _ => rec.cloud,
            };
            io::write_grid_ply(&out.join("points.ply"), &points)?;
            io::write_pfm(&out.join("depth_integrated.pfm"), &rec.integration.depth)?;
            io::write_json(
                &out.join("recon_report.json"),
                &json!({
                    "points": points.valid_count(),
                    "objective_trace": rec.integration.objective_trace,
                    "cg_iterations": rec.integration.cg_iterations,
                    "flipped_normals": rec.integration.flipped_normals,
                }),
            )?;
        }
        Command::Mirror { points } => {
            let points = io::read_grid_ply(&points)?;
            let (mirrored, report) = pipeline::complete(&points, &cfg)?;
            io::write_grid_ply(&out.join("mirrored.ply"), &mirrored)?;
            io::write_json(&out.join("filter_report.json"), &report)?;
        }
        Command::Decode { points, mirrored, color, checkpoint } => {
            let points = io::read_grid_ply(&points)?;
            let mirrored = mirrored.map(|p| io::read_grid_ply(&p)).transpose()?;
            let features = identity_features(&io::read_image(&color)?)?;
            let bundle = bundle_or_prior(checkpoint.as_deref(), &points, &cfg)?;
            let (points, mirrored) = pipeline::drive(&points, mirrored.as_ref(), &bundle, &cfg)?;
            let cloud = pipeline::decode(&bundle, &PipelineInputs { points, mirrored, features })?;
            io::write_gaussian_ply(&out.join("gaussians.ply"), &cloud)?;
            io::write_json(&out.join("decode_report.json"), &provenance_counts(&cloud))?;
        }
        Command::Render { gaussians, camera, yaw, composite } => {
            let cloud = io::read_gaussian_ply(&gaussians)?;
            let base = match camera {
                Some(p) => io::read_camera(&p)?,
                None => cfg.base_camera()?,
            };
            let yaws = if yaw.is_empty() { cfg.yaws.clone() } else { yaw };
            let background = composite.map(|p| io::read_image(&p)).transpose()?;
            for (yaw, _, frame) in pipeline::render_yaws(&cloud, &base, &yaws, &cfg.render)? {
                let tag = pipeline::yaw_tag(yaw);
                let color = match &background {
                    Some(bg) => pipeline::composite_over(&frame, bg)?,
                    None => frame.color.clone(),
                };
                io::write_png(&out.join(format!("frame_{tag}.png")), &color)?;
                io::write_pfm(&out.join(format!("color_{tag}.pfm")), &color)?;
                io::write_pfm(&out.join(format!("alpha_{tag}.pfm")), &frame.alpha)?;
            }
        }
        Command::Fit { scenes, gaussians, checkpoint, no_symmetry, steps } => {
            let mut loss = cfg.loss.clone();
            if let Some(s) = steps {
                loss.steps = s;
            }
            let views = scenes.iter().map(|d| io::read_scene(d)).collect::<Result<Vec<_>>>()?;
            let targets: Vec<TargetView> = views
                .iter()
                .map(|v| TargetView { camera: v.camera.clone(), image: v.color.clone() })
                .collect();
            let (cloud, trace) = match gaussians {
                Some(g) => {
                    let fit = fit_gaussians(&io::read_gaussian_ply(&g)?, &targets, &loss, &cfg.render)?;
                    (fit.cloud, fit.trace)
                }
                None => {
                    let surface = pipeline::reconstruct_surface(&views[0], &cfg, None)?;
                    let bundle = bundle_or_prior(checkpoint.as_deref(), &surface.points, &cfg)?;
                    let mirrored = if no_symmetry { None } else { Some(pipeline::complete(&surface.points, &cfg)?.0) };
                    let inputs = pipeline::decoder_inputs(&surface, mirrored.as_ref(), &bundle, &cfg)?;
                    let fit = fit_pipeline(&bundle, &inputs, &targets, &loss, &cfg.render)?;
                    io::write_checkpoint(&out.join("checkpoint.bin"), &fit.bundle)?;
                    (fit.cloud, fit.trace)
                }
            };
            io::write_gaussian_ply(&out.join("gaussians.ply"), &cloud)?;
            write_trace(&out.join("trace.csv"), &trace)?;
            let first = trace.first().map(|r| r.total);
            let last = trace.last().map(|r| r.total);
            io::write_json(
                &out.join("fit_report.json"),
                &json!({ "steps": loss.steps, "initial_loss": first, "final_loss": last, "gaussians": provenance_counts(&cloud) }),
            )?;
        }
        Command::Eval { a, b } => {
            let (a, b) = (io::read_image(&a)?, io::read_image(&b)?);
            let report = json!({ "psnr": psnr(&a, &b)?, "ssim": ssim(&a, &b, &cfg.loss)? });
            io::write_json(&out.join("eval.json"), &report)?;
            println!("{report}");
        }
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidInput(_) | Error::BehindCamera { .. } => "invalid_input",
        Error::Format { .. } => "format",
        Error::NumericalFailure { .. } | Error::NonFiniteLoss { .. } => "numerical",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", json!({ "error": { "kind": error_kind(&e), "code": code, "message": e.to_string() } }));
            ExitCode::from(code as u8)
        }
    }
}
