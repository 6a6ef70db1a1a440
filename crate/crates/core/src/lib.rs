//! Single-view Gaussian head reconstruction and software splatting.
//!
//! The pipeline turns a depth map, a normal map and a color image of a head
//! into a complete set of 3D Gaussians:
//!
//! 1. [`surface_recon`] integrates the normal map against the depth map and
//!    back-projects the result into a grid point cloud.
//! 2. [`regressors::refine_geometry`] adds learned per-point offsets.
//! 3. [`symmetry`] mirrors the cloud across the sagittal plane and drops
//!    mirrored points that overlap or occlude the original geometry.
//! 4. [`regressors`] decodes Gaussian parameters for the visible points, then
//!    predicts the mirrored points' parameters as offsets from their visible
//!    counterparts; [`gaussians::densify`] adds one child per Gaussian.
//! 5. [`renderer`] splats the result from any viewpoint with a tile-based
//!    rasterizer and exposes analytic color/opacity gradients, which
//!    [`fit`] uses to optimize parameters against target views.
//!
//! [`synth`] produces procedural head scenes so that every stage can be
//! checked without datasets, and [`io`] holds the file formats.

pub mod camera;
pub mod error;
pub mod fit;
pub mod gaussians;
pub mod geom;
pub mod io;
pub mod pipeline;
pub mod regressors;
pub mod renderer;
pub mod surface_recon;
pub mod symmetry;
pub mod synth;

pub use camera::{quat_to_rotation, yaw_camera, Camera, CameraSpec, Quaternion};
pub use error::{Error, Result};
pub use gaussians::{concat, covariance, densify, eval_color, Gaussian, GaussianCloud, Provenance};
pub use geom::{ExpressionCoeffs, GeomImage, GridPointCloud, ImageKind, Vec3};
