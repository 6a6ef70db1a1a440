//! End-to-end orchestration shared by the command-line tool and examples:
//! normal integration, symmetric completion, deformation, decoding and
//! multi-view rendering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{yaw_camera, Camera, CameraSpec};
use crate::error::{Error, Result};
use crate::fit::{decode_pipeline, LossConfig, PipelineInputs};
use crate::gaussians::GaussianCloud;
use crate::geom::{ExpressionCoeffs, GeomImage, GridPointCloud, ImageKind, Vec3};
use crate::regressors::{deform, identity_features, refine_geometry, RegressorBundle, RegressorConfig};
use crate::renderer::{render, RenderConfig, RenderOutput};
use crate::surface_recon::{reconstruct, BiniConfig, Integration};
use crate::symmetry::{median_nn_spacing, symmetric_complete, FilterReport, VoxelFilterConfig};
use crate::synth::{SynthConfig, SynthView};

/// Every module's settings in one JSON document. Unknown keys are rejected
/// and every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub bini: BiniConfig,
    pub voxel: VoxelFilterConfig,
    pub regressor: RegressorConfig,
    pub loss: LossConfig,
    pub render: RenderConfig,
    /// Overrides the synthetic frontal camera when rendering.
    pub camera: Option<CameraSpec>,
    /// Yaw angles (degrees) rendered by default.
    pub yaws: Vec<f64>,
    /// Driving and source expression coefficients; empty means zeros.
    pub driving_expression: Vec<f64>,
    pub source_expression: Vec<f64>,
    /// Decoder output-bias prior: Gaussian scale as a multiple of the median
    /// point spacing, and the opacity logit.
    pub scale_prior: f64,
    pub opacity_prior: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            bini: BiniConfig::default(),
            voxel: VoxelFilterConfig::default(),
            regressor: RegressorConfig::default(),
            loss: LossConfig::default(),
            render: RenderConfig::default(),
            camera: None,
            yaws: vec![-30.0, 0.0, 30.0],
            driving_expression: Vec::new(),
            source_expression: Vec::new(),
            scale_prior: 0.6,
            opacity_prior: 3.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.bini.validate()?;
        self.loss.validate()?;
        self.render.validate()?;
        if let Some(c) = &self.camera {
            Camera::from_spec(c)?;
        }
        if !(self.scale_prior > 0.0) || !self.opacity_prior.is_finite() {
            return Err(Error::invalid("scale_prior must be positive and opacity_prior finite"));
        }
        self.driving()?;
        self.source()?;
        Ok(())
    }

    /// Applies a global seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.regressor.seed = seed;
        self
    }

    fn expression(&self, v: &[f64]) -> Result<ExpressionCoeffs> {
        let dim = self.regressor.expression_dim;
        let e = if v.is_empty() { ExpressionCoeffs::zeros(dim) } else { ExpressionCoeffs(v.to_vec()) };
        e.validate(dim)?;
        Ok(e)
    }

    pub fn driving(&self) -> Result<ExpressionCoeffs> {
        self.expression(&self.driving_expression)
    }

    pub fn source(&self) -> Result<ExpressionCoeffs> {
        self.expression(&self.source_expression)
    }

    /// The configured camera, or the synthetic frontal camera.
    pub fn base_camera(&self) -> Result<Camera> {
        match &self.camera {
            Some(spec) => Camera::from_spec(spec),
            None => self.synth.frontal_camera(),
        }
    }
}

/// The rasters a reconstruction starts from.
#[derive(Debug, Clone)]
pub struct SourceView {
    pub camera: Camera,
    pub color: GeomImage,
    pub depth: GeomImage,
    pub normal: GeomImage,
    pub mask: GeomImage,
}

impl From<&SynthView> for SourceView {
    fn from(v: &SynthView) -> Self {
        Self {
            camera: v.camera.clone(),
            color: v.color.clone(),
            depth: v.depth.clone(),
            normal: v.normal.clone(),
            mask: v.mask.clone(),
        }
    }
}

/// Integrated surface `P_f` with optional learned refinement.
#[derive(Debug, Clone)]
pub struct Surface {
    pub points: GridPointCloud,
    pub features: GeomImage,
    pub integration: Integration,
}

pub fn reconstruct_surface(view: &SourceView, cfg: &PipelineConfig, bundle: Option<&RegressorBundle>) -> Result<Surface> {
    let rec = reconstruct(&view.depth, &view.normal, &view.mask, &view.camera, &cfg.bini)?;
    let features = identity_features(&view.color)?;
    let points = match bundle {
        Some(b) => refine_geometry(&rec.cloud, &features, &b.refine)?,
        None => rec.cloud,
    };
    Ok(Surface {
        points,
        features,
        integration: rec.integration,
    })
}

/// Mirrored, filtered completion `P_f^s` of a surface.
pub fn complete(points: &GridPointCloud, cfg: &PipelineConfig) -> Result<(GridPointCloud, FilterReport)> {
    let (_, outcome) = symmetric_complete(points, &cfg.voxel)?;
    Ok((outcome.cloud, outcome.report))
}

/// Fresh regressors with the decoder's output biases set from the point
/// spacing of `points`.
pub fn initial_bundle(points: &GridPointCloud, cfg: &PipelineConfig) -> Result<RegressorBundle> {
    points.require_nonempty("decoder prior")?;
    let pts: Vec<Vec3> = points.iter_valid().map(|(_, p)| p).collect();
    let spacing = median_nn_spacing(&pts)?;
    let mut bundle = RegressorBundle::new(&cfg.regressor);
    bundle.set_decoder_prior((cfg.scale_prior * spacing).ln(), cfg.opacity_prior);
    Ok(bundle)
}

/// Expression-driven deformation of the visible and mirrored sets.
pub fn drive(
    points: &GridPointCloud,
    mirrored: Option<&GridPointCloud>,
    bundle: &RegressorBundle,
    cfg: &PipelineConfig,
) -> Result<(GridPointCloud, Option<GridPointCloud>)> {
    let (bd, bs) = (cfg.driving()?, cfg.source()?);
    let p = deform(points, &bd, &bs, &bundle.deform)?;
    let m = mirrored.map(|m| deform(m, &bd, &bs, &bundle.deform)).transpose()?;
    Ok((p, m))
}

/// Decoder inputs for a surface and its optional completion, after driving.
pub fn decoder_inputs(
    surface: &Surface,
    mirrored: Option<&GridPointCloud>,
    bundle: &RegressorBundle,
    cfg: &PipelineConfig,
) -> Result<PipelineInputs> {
    let (points, mirrored) = drive(&surface.points, mirrored, bundle, cfg)?;
    Ok(PipelineInputs {
        points,
        mirrored,
        features: surface.features.clone(),
    })
}

pub fn decode(bundle: &RegressorBundle, inputs: &PipelineInputs) -> Result<GaussianCloud> {
    decode_pipeline(bundle, inputs)
}

/// Renders `cloud` from `base` orbited by each yaw, in parallel.
pub fn render_yaws(
    cloud: &GaussianCloud,
    base: &Camera,
    yaws: &[f64],
    cfg: &RenderConfig,
) -> Result<Vec<(f64, Camera, RenderOutput)>> {
    yaws.par_iter()
        .map(|yaw| {
            let cam = yaw_camera(base, *yaw, &Vec3::zeros())?;
            let out = render(cloud, &cam, cfg)?;
            Ok((*yaw, cam, out))
        })
        .collect()
}

/// `color + (1 - alpha) * background`.
pub fn composite_over(out: &RenderOutput, background: &GeomImage) -> Result<GeomImage> {
    if background.width() != out.color.width() || background.height() != out.color.height() || background.channels() != 3 {
        return Err(Error::invalid("background must be a color image of the render size"));
    }
    let mut img = GeomImage::new(out.color.width(), out.color.height(), 3, ImageKind::Color);
    let c = out.color.data();
    let b = background.data();
    let a = out.alpha.data();
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = c[i] + (1.0 - a[i / 3]) * b[i];
    }
    Ok(img)
}

/// File-name tag for a yaw angle, e.g. `m30`, `0`, `p30`.
pub fn yaw_tag(yaw: f64) -> String {
    let mag = format!("{}", yaw.abs());
    if yaw > 0.0 {
        format!("p{mag}")
    } else if yaw < 0.0 {
        format!("m{mag}")
    } else {
        "0".to_string()
    }
}
