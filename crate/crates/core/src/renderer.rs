//! Tile-based software splatting: EWA projection, depth sort, front-to-back
//! alpha compositing and analytic color/opacity gradients.
//!
//! Pixel `(x, y)` is sampled at its center `(x + 0.5, y + 0.5)`. Tiled and
//! reference paths share the per-pixel compositing routine, so a splat only
//! has to reach every tile where its alpha can clear the floor for the two
//! to agree.

use nalgebra::{Matrix2x3, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{eval_color_with_mask, sh_basis, ColorCoeffs, Gaussian, GaussianCloud, COLOR_DIM};
use crate::geom::{GeomImage, ImageKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub alpha_ceiling: f64,
    pub alpha_floor: f64,
    /// Isotropic screen-space blur added to every projected covariance, px².
    pub blur: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_ceiling: 0.999,
            alpha_floor: 1.0 / 255.0,
            blur: 0.3,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::invalid("tile_size must be positive"));
        }
        if !(self.alpha_ceiling > 0.0 && self.alpha_ceiling < 1.0) {
            return Err(Error::invalid("alpha_ceiling must lie in (0, 1)"));
        }
        if !(self.alpha_floor >= 0.0 && self.alpha_floor < self.alpha_ceiling) {
            return Err(Error::invalid("alpha_floor must lie in [0, alpha_ceiling)"));
        }
        if !(self.blur >= 0.0 && self.blur.is_finite()) {
            return Err(Error::invalid("blur must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Covariance (xx, xy, yy) in px², blur included.
    pub cov2d: [f64; 3],
    /// Inverse covariance (xx, xy, yy).
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    /// Channels whose color is strictly inside (0, 1).
    pub color_live: [bool; 3],
    pub sh: [f64; 4],
    pub alpha_base: f64,
    pub source_index: usize,
}

impl Splat2D {
    #[inline]
    fn alpha_at(&self, px: f64, py: f64, ceiling: f64) -> f64 {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        (self.alpha_base * (-0.5 * q).exp()).min(ceiling)
    }

    /// Half-widths of the region where alpha can reach `floor`, or `None`
    /// when it never can.
    fn extent(&self, floor: f64) -> Option<[f64; 2]> {
        if floor <= 0.0 {
            return Some([f64::INFINITY; 2]);
        }
        let ratio = self.alpha_base / floor;
        if ratio < 1.0 {
            return None;
        }
        let q_max = 2.0 * ratio.ln();
        let slack = |v: f64| v * (1.0 + 1e-6) + 1e-3;
        Some([slack((q_max * self.cov2d[0]).sqrt()), slack((q_max * self.cov2d[2]).sqrt())])
    }
}

/// EWA projection of one Gaussian. `Ok(None)` when it lies at or behind the
/// near plane.
pub fn project_gaussian(g: &Gaussian, index: usize, camera: &Camera, cfg: &RenderConfig) -> Result<Option<Splat2D>> {
    let pc = camera.world_to_camera(&g.position);
    if !(pc.z > camera.z_near) {
        return Ok(None);
    }
    let sigma = g.covariance()?;
    let w: &Matrix3<f64> = camera.rotation_matrix();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let j = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    );
    let t = j * w;
    let c = t * sigma * t.transpose();
    let cov = [c[(0, 0)] + cfg.blur, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + cfg.blur];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !det.is_finite() {
        return Ok(None);
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let view = (g.position - camera.center()).normalize();
    let (color, color_live) = eval_color_with_mask(&g.color, &view);
    Ok(Some(Splat2D {
        mean2d: [camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy],
        cov2d: cov,
        conic,
        depth: z,
        color,
        color_live,
        sh: sh_basis(&view),
        alpha_base: g.opacity(),
        source_index: index,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: GeomImage,
    /// `1 - transmittance`, in [0, 1].
    pub alpha: GeomImage,
    pub transmittance: GeomImage,
}

impl RenderOutput {
    fn blank(w: usize, h: usize) -> Self {
        Self {
            color: GeomImage::new(w, h, 3, ImageKind::Color),
            alpha: GeomImage::new(w, h, 1, ImageKind::Feature),
            transmittance: GeomImage::filled(w, h, 1, ImageKind::Feature, 1.0),
        }
    }
}

/// Projected, depth-sorted splats with per-tile lists (indices into `splats`,
/// already in compositing order).
#[derive(Debug, Clone)]
pub struct Frame {
    pub splats: Vec<Splat2D>,
    pub tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
    width: usize,
    height: usize,
    cfg: RenderConfig,
}

fn project_all(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Result<Vec<Splat2D>> {
    cfg.validate()?;
    cloud.validate()?;
    let mut splats = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        if let Some(s) = project_gaussian(&cloud.get(i), i, camera, cfg)? {
            splats.push(s);
        }
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));
    Ok(splats)
}

impl Frame {
    pub fn new(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Result<Self> {
        let splats = project_all(cloud, camera, cfg)?;
        let (w, h, ts) = (camera.width, camera.height, cfg.tile_size);
        let tiles_x = w.div_ceil(ts);
        let tiles_y = h.div_ceil(ts);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in splats.iter().enumerate() {
            let Some([rx, ry]) = s.extent(cfg.alpha_floor) else {
                continue;
            };
            // pixel centers x + 0.5 inside [u - rx, u + rx]
            let x0 = (s.mean2d[0] - rx - 0.5).ceil().max(0.0);
            let x1 = (s.mean2d[0] + rx - 0.5).floor().min(w as f64 - 1.0);
            let y0 = (s.mean2d[1] - ry - 0.5).ceil().max(0.0);
            let y1 = (s.mean2d[1] + ry - 0.5).floor().min(h as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
            let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Ok(Self {
            splats,
            tiles,
            tiles_x,
            tiles_y,
            width: w,
            height: h,
            cfg: cfg.clone(),
        })
    }

    fn tile_pixels(&self, t: usize) -> impl Iterator<Item = (usize, usize)> {
        let ts = self.cfg.tile_size;
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let (x0, y0) = (tx * ts, ty * ts);
        let (x1, y1) = ((x0 + ts).min(self.width), (y0 + ts).min(self.height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    pub fn render(&self) -> RenderOutput {
        let n_tiles = self.tiles_x * self.tiles_y;
        let tile_out: Vec<Vec<(usize, usize, [f64; 3], f64)>> = (0..n_tiles)
            .into_par_iter()
            .map(|t| {
                let list: Vec<&Splat2D> = self.tiles[t].iter().map(|k| &self.splats[*k as usize]).collect();
                self.tile_pixels(t)
                    .map(|(x, y)| {
                        let (c, tr) = composite(list.iter().copied(), x, y, &self.cfg);
                        (x, y, c, tr)
                    })
                    .collect()
            })
            .collect();
        let mut out = RenderOutput::blank(self.width, self.height);
        for tile in tile_out {
            for (x, y, c, tr) in tile {
                write_pixel(&mut out, x, y, c, tr);
            }
        }
        out
    }

    /// Gradients of `sum(upstream * color)` with respect to each source
    /// Gaussian's color coefficients and opacity logit.
    pub fn backward(&self, upstream: &GeomImage, n_gaussians: usize) -> Result<ColorOpacityGrad> {
        if upstream.width() != self.width || upstream.height() != self.height || upstream.channels() != 3 {
            return Err(Error::invalid("upstream gradient must be a 3-channel image matching the camera"));
        }
        let ceiling = self.cfg.alpha_ceiling;
        let floor = self.cfg.alpha_floor;
        let n_tiles = self.tiles_x * self.tiles_y;
        let per_tile: Vec<(Vec<[f64; 3]>, Vec<f64>)> = (0..n_tiles)
            .into_par_iter()
            .map(|t| {
                let list = &self.tiles[t];
                let mut d_rgb = vec![[0.0; 3]; list.len()];
                let mut d_logit = vec![0.0; list.len()];
                let mut hits: Vec<(usize, f64, f64)> = Vec::new();
                for (x, y) in self.tile_pixels(t) {
                    let g = upstream.pixel(x, y);
                    if g.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    hits.clear();
                    let mut tr = 1.0;
                    for (slot, k) in list.iter().enumerate() {
                        let s = &self.splats[*k as usize];
                        let a = s.alpha_at(px, py, ceiling);
                        if a < floor {
                            continue;
                        }
                        hits.push((slot, a, tr));
                        tr *= 1.0 - a;
                    }
                    // back to front: behind = sum over later splats of c a T
                    let mut behind = [0.0; 3];
                    for &(slot, a, t_i) in hits.iter().rev() {
                        let s = &self.splats[list[slot] as usize];
                        let w = a * t_i;
                        let mut d_alpha = 0.0;
                        for ch in 0..3 {
                            d_rgb[slot][ch] += g[ch] * w;
                            d_alpha += g[ch] * (s.color[ch] * t_i - behind[ch] / (1.0 - a));
                            behind[ch] += s.color[ch] * w;
                        }
                        if a < ceiling {
                            d_logit[slot] += d_alpha * a * (1.0 - s.alpha_base);
                        }
                    }
                }
                (d_rgb, d_logit)
            })
            .collect();

        let mut d_rgb = vec![[0.0; 3]; self.splats.len()];
        let mut d_logit = vec![0.0; self.splats.len()];
        for (t, (rgb, lg)) in per_tile.iter().enumerate() {
            for (slot, k) in self.tiles[t].iter().enumerate() {
                let k = *k as usize;
                for ch in 0..3 {
                    d_rgb[k][ch] += rgb[slot][ch];
                }
                d_logit[k] += lg[slot];
            }
        }
        let mut out = ColorOpacityGrad::zeros(n_gaussians);
        for (k, s) in self.splats.iter().enumerate() {
            if s.source_index >= n_gaussians {
                return Err(Error::invalid("frame was built from a larger cloud"));
            }
            let gc = &mut out.color[s.source_index];
            for ch in 0..3 {
                if s.color_live[ch] {
                    for b in 0..4 {
                        gc[ch * 4 + b] = d_rgb[k][ch] * s.sh[b];
                    }
                }
            }
            out.opacity_logit[s.source_index] = d_logit[k];
        }
        Ok(out)
    }
}

#[inline]
fn composite<'a>(splats: impl Iterator<Item = &'a Splat2D>, x: usize, y: usize, cfg: &RenderConfig) -> ([f64; 3], f64) {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut c = [0.0; 3];
    let mut tr = 1.0;
    for s in splats {
        let a = s.alpha_at(px, py, cfg.alpha_ceiling);
        if a < cfg.alpha_floor {
            continue;
        }
        let w = a * tr;
        for ch in 0..3 {
            c[ch] += s.color[ch] * w;
        }
        tr *= 1.0 - a;
    }
    (c, tr)
}

fn write_pixel(out: &mut RenderOutput, x: usize, y: usize, c: [f64; 3], tr: f64) {
    for (ch, v) in c.iter().enumerate() {
        out.color.set(x, y, ch, *v);
    }
    out.alpha.set(x, y, 0, 1.0 - tr);
    out.transmittance.set(x, y, 0, tr);
}

/// Tiled forward render. An empty cloud renders transparent black.
pub fn render(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    Ok(Frame::new(cloud, camera, cfg)?.render())
}

/// Per-pixel render over every projected splat, without tiling.
pub fn render_reference(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    let splats = project_all(cloud, camera, cfg)?;
    let (w, h) = (camera.width, camera.height);
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|y| (0..w).map(|x| composite(splats.iter(), x, y, cfg)).collect())
        .collect();
    let mut out = RenderOutput::blank(w, h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, tr)) in row.into_iter().enumerate() {
            write_pixel(&mut out, x, y, c, tr);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorOpacityGrad {
    pub color: Vec<ColorCoeffs>,
    pub opacity_logit: Vec<f64>,
}

impl ColorOpacityGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            color: vec![[0.0; COLOR_DIM]; n],
            opacity_logit: vec![0.0; n],
        }
    }

    pub fn add_assign(&mut self, other: &ColorOpacityGrad) {
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *a += b;
        }
    }
}

/// Analytic gradient of `sum(upstream * rendered color)` with respect to
/// every Gaussian's color coefficients and opacity logit.
pub fn render_grad_color_opacity(
    cloud: &GaussianCloud,
    camera: &Camera,
    cfg: &RenderConfig,
    upstream: &GeomImage,
) -> Result<ColorOpacityGrad> {
    Frame::new(cloud, camera, cfg)?.backward(upstream, cloud.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Quaternion;
    use crate::gaussians::{flat_color, logit, Provenance, SH_C0};
    use crate::geom::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(p: Vec3, scale: f64, opacity: f64, rgb: [f64; 3]) -> Gaussian {
        Gaussian {
            position: p,
            rotation: Quaternion::IDENTITY,
            log_scale: [scale.ln(); 3],
            opacity_logit: logit(opacity),
            color: flat_color(rgb),
        }
    }

    fn cloud_of(gs: &[Gaussian]) -> GaussianCloud {
        let mut c = GaussianCloud::new();
        for g in gs {
            c.push(*g, Provenance::Visible, None);
        }
        c
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        let mut c = GaussianCloud::new();
        for _ in 0..n {
            let mut color = [0.0; COLOR_DIM];
            color.iter_mut().for_each(|v| *v = rng.gen_range(-0.6..0.6));
            c.push(
                Gaussian {
                    position: Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-0.8..0.8)),
                    rotation: Quaternion::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                    log_scale: [rng.gen_range(-3.5..-1.5), rng.gen_range(-3.5..-1.5), rng.gen_range(-3.5..-1.5)],
                    opacity_logit: rng.gen_range(-2.0..3.0),
                    color,
                },
                Provenance::Visible,
                None,
            );
        }
        c
    }

    fn cam(size: usize) -> Camera {
        Camera::frontal(size, size, size as f64, 4.0).unwrap()
    }

    #[test]
    fn isotropic_on_axis_projects_to_principal_point() {
        let c = cam(64);
        let s = project_gaussian(&gaussian(Vec3::zeros(), 0.1, 0.5, [0.5; 3]), 0, &c, &RenderConfig::default())
            .unwrap()
            .unwrap();
        assert!((s.mean2d[0] - c.cx).abs() < 1e-12 && (s.mean2d[1] - c.cy).abs() < 1e-12);
        assert!((s.cov2d[0] - s.cov2d[2]).abs() < 1e-12);
        assert!(s.cov2d[1].abs() < 1e-12);
    }

    #[test]
    fn doubling_depth_halves_sigma() {
        let c = Camera::frontal(256, 256, 256.0, 0.0).unwrap();
        let cfg = RenderConfig::default();
        let sigma_at = |z: f64| {
            let s = project_gaussian(&gaussian(Vec3::new(0.0, 0.0, z), 0.05, 0.5, [0.5; 3]), 0, &c, &cfg)
                .unwrap()
                .unwrap();
            (s.cov2d[0] - cfg.blur).sqrt()
        };
        let ratio = sigma_at(4.0) / sigma_at(2.0);
        assert!((ratio - 0.5).abs() < 0.005, "{ratio}");
    }

    #[test]
    fn behind_camera_is_culled() {
        let c = cam(32);
        let g = gaussian(Vec3::new(0.0, 0.0, -10.0), 0.1, 0.5, [0.5; 3]);
        assert!(project_gaussian(&g, 0, &c, &RenderConfig::default()).unwrap().is_none());
        let out = render(&cloud_of(&[g]), &c, &RenderConfig::default()).unwrap();
        assert!(out.color.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn peak_alpha_equals_opacity() {
        let c = cam(33);
        // pixel (16, 16) has center (16.5, 16.5); the camera's principal point
        // is at 16.5 for an odd width
        let g = gaussian(Vec3::zeros(), 0.2, 0.8, [0.5; 3]);
        let out = render(&cloud_of(&[g]), &c, &RenderConfig::default()).unwrap();
        assert!((out.alpha.get(16, 16, 0) - 0.8).abs() < 1e-9);
    }

    #[test]
    fn two_gaussians_match_hand_compositing() {
        let c = cam(32);
        let cfg = RenderConfig::default();
        let front = gaussian(Vec3::new(0.05, 0.0, -0.5), 0.3, 0.6, [0.9, 0.1, 0.2]);
        let back = gaussian(Vec3::new(-0.05, 0.02, 0.5), 0.4, 0.7, [0.1, 0.8, 0.3]);
        let out = render(&cloud_of(&[back, front]), &c, &cfg).unwrap();
        let (x, y) = (17, 15);
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let a = |g: &Gaussian| {
            let s = project_gaussian(g, 0, &c, &cfg).unwrap().unwrap();
            let dx = [px - s.mean2d[0], py - s.mean2d[1]];
            let m = nalgebra::Matrix2::new(s.cov2d[0], s.cov2d[1], s.cov2d[1], s.cov2d[2]);
            let d = nalgebra::Vector2::new(dx[0], dx[1]);
            let q = (d.transpose() * m.try_inverse().unwrap() * d)[0];
            (s.alpha_base * (-0.5 * q).exp(), s.color)
        };
        let (a1, c1) = a(&front);
        let (a2, c2) = a(&back);
        for ch in 0..3 {
            let want = c1[ch] * a1 + c2[ch] * a2 * (1.0 - a1);
            assert!((out.color.get(x, y, ch) - want).abs() < 1e-12);
        }
        assert!((out.alpha.get(x, y, 0) - (1.0 - (1.0 - a1) * (1.0 - a2))).abs() < 1e-12);
    }

    #[test]
    fn empty_regions_are_transparent_black() {
        let c = cam(64);
        let g = gaussian(Vec3::new(-0.8, -0.8, 0.0), 0.02, 0.9, [1.0; 3]);
        let out = render(&cloud_of(&[g]), &c, &RenderConfig::default()).unwrap();
        assert_eq!(out.color.pixel(60, 60), &[0.0, 0.0, 0.0]);
        assert_eq!(out.alpha.get(60, 60, 0), 0.0);
        let empty = render(&GaussianCloud::new(), &c, &RenderConfig::default()).unwrap();
        assert!(empty.alpha.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tiled_equals_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = RenderConfig::default();
        for n in [1, 10, 200] {
            let scene = random_scene(&mut rng, n);
            let c = cam(48);
            let a = render(&scene, &c, &cfg).unwrap();
            let b = render_reference(&scene, &c, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn alpha_is_one_minus_transmittance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = render(&random_scene(&mut rng, 100), &cam(32), &RenderConfig::default()).unwrap();
        for (a, t) in out.alpha.data().iter().zip(out.transmittance.data()) {
            assert!((a - (1.0 - t)).abs() <= 1e-12);
            assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn single_gaussian_dc_gradient() {
        let c = cam(33);
        let cfg = RenderConfig::default();
        let g = gaussian(Vec3::zeros(), 0.2, 0.8, [0.5; 3]);
        let cloud = cloud_of(&[g]);
        let mut up = GeomImage::new(33, 33, 3, ImageKind::Color);
        up.set(16, 16, 1, 1.0);
        let grad = render_grad_color_opacity(&cloud, &c, &cfg, &up).unwrap();
        assert!((grad.color[0][4] - SH_C0 * 0.8).abs() < 1e-9);
        assert_eq!(grad.color[0][0], 0.0);
    }

    #[test]
    fn clamped_channel_has_zero_gradient() {
        let c = cam(33);
        let cfg = RenderConfig::default();
        let g = gaussian(Vec3::zeros(), 0.2, 0.8, [1.5, 0.5, -0.5]);
        let up = GeomImage::filled(33, 33, 3, ImageKind::Color, 1.0);
        let grad = render_grad_color_opacity(&cloud_of(&[g]), &c, &cfg, &up).unwrap();
        assert!(grad.color[0][0..4].iter().all(|v| *v == 0.0));
        assert!(grad.color[0][8..12].iter().all(|v| *v == 0.0));
        assert!(grad.color[0][4] != 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = RenderConfig::default();
        let c = cam(24);
        let scene = random_scene(&mut rng, 20);
        let mut up = GeomImage::new(24, 24, 3, ImageKind::Color);
        up.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let loss = |s: &GaussianCloud| -> f64 {
            let o = render(s, &c, &cfg).unwrap();
            o.color.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let grad = render_grad_color_opacity(&scene, &c, &cfg, &up).unwrap();
        let h = 1e-6;
        for i in 0..scene.len() {
            let mut p = scene.clone();
            p.opacity_logits[i] += h;
            let mut m = scene.clone();
            m.opacity_logits[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = grad.opacity_logit[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-4), "opacity {i}: {fd} vs {an}");
            for k in 0..COLOR_DIM {
                let mut p = scene.clone();
                p.colors[i][k] += h;
                let mut m = scene.clone();
                m.colors[i][k] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grad.color[i][k];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-4), "color {i}/{k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = random_scene(&mut rng, 50);
        let mut order: Vec<usize> = (0..50).collect();
        order.reverse();
        order.swap(3, 17);
        let mut perm = GaussianCloud::new();
        for i in &order {
            perm.push(scene.get(*i), Provenance::Visible, None);
        }
        let c = cam(32);
        let cfg = RenderConfig::default();
        // ties in depth are broken by index, so keep depths distinct here
        assert_eq!(render(&scene, &c, &cfg).unwrap(), render(&perm, &c, &cfg).unwrap());
    }
}
