//! Procedural head-like test scenes: a sphere-traced smooth union of an
//! ellipsoid and spherical bumps, shaded with a fixed light.
//!
//! World frame: head centered at the origin, y down, nose toward -z. The
//! frontal camera sits at (0, 0, -distance) looking down +z.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{yaw_camera, Camera};
use crate::error::{Error, Result};
use crate::geom::{GeomImage, ImageKind, Vec3};

const MAX_STEPS: usize = 256;
const SURFACE_EPS: f64 = 1e-5;
const FAR: f64 = 100.0;
const NORMAL_H: f64 = 1e-4;
const RELAX: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Mirrored pair at +-x.
    Both,
    Left,
    Right,
}

/// A spherical bump. For `Both` the center's x is mirrored to both sides;
/// `Left` places it at -|x| and `Right` at +|x|.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: [f64; 3],
    pub radius: f64,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub radii: [f64; 3],
    pub ears: Vec<Bump>,
    pub nose: Option<Bump>,
    /// Size of a one-sided hair tuft on the +x crown; 0 keeps the scene
    /// mirror-symmetric.
    pub asymmetry: f64,
    /// Which side carries the tuft.
    pub asymmetry_side: Side,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub distance: f64,
    /// Unit vector toward the light (world frame).
    pub light: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            radii: [0.72, 0.9, 0.82],
            ears: vec![Bump {
                center: [0.72, 0.05, 0.05],
                radius: 0.17,
                side: Side::Both,
            }],
            nose: Some(Bump {
                center: [0.0, 0.1, -0.8],
                radius: 0.14,
                side: Side::Both,
            }),
            asymmetry: 0.0,
            asymmetry_side: Side::Right,
            width: 128,
            height: 128,
            focal: 150.0,
            distance: 4.0,
            light: [0.0, -0.4, -1.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A plain sphere with no bumps.
    pub fn sphere(radius: f64) -> Self {
        Self {
            radii: [radius; 3],
            ears: Vec::new(),
            nose: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.radii.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(Error::invalid("head radii must be positive"));
        }
        let min_r = self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        for b in self.ears.iter().chain(self.nose.iter()) {
            if !(b.radius > 0.0 && b.radius < min_r) {
                return Err(Error::invalid(format!("bump radius {} must lie in (0, {min_r})", b.radius)));
            }
        }
        if !(self.asymmetry >= 0.0) || self.tuft_radius() >= min_r {
            return Err(Error::invalid("asymmetry must be nonnegative and keep the tuft smaller than the head"));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) || !(self.distance > 0.0) {
            return Err(Error::invalid("image size, focal and distance must be positive"));
        }
        if Vec3::from(self.light).norm() == 0.0 {
            return Err(Error::invalid("light direction must be nonzero"));
        }
        Ok(())
    }

    /// The same scene reflected through x = 0.
    pub fn mirrored(&self) -> Self {
        let flip = |s: Side| match s {
            Side::Both => Side::Both,
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        };
        let mut m = self.clone();
        m.ears.iter_mut().chain(m.nose.iter_mut()).for_each(|b| b.side = flip(b.side));
        m.asymmetry_side = flip(self.asymmetry_side);
        m.light[0] = -m.light[0];
        m
    }

    fn tuft_radius(&self) -> f64 {
        0.4 * self.asymmetry
    }

    pub fn frontal_camera(&self) -> Result<Camera> {
        Camera::frontal(self.width, self.height, self.focal, self.distance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Head,
    Ear,
    Nose,
    Tuft,
}

fn bump_center(b: &Bump) -> Vec3 {
    let x = b.center[0].abs();
    Vec3::new(
        match b.side {
            Side::Left => -x,
            _ => x,
        },
        b.center[1],
        b.center[2],
    )
}

fn sphere_sdf(p: &Vec3, b: &Bump) -> f64 {
    let q = if b.side == Side::Both { Vec3::new(p.x.abs(), p.y, p.z) } else { *p };
    (q - bump_center(b)).norm() - b.radius
}

fn smin(a: f64, b: f64, k: f64) -> f64 {
    let h = (k - (a - b).abs()).max(0.0) / k;
    a.min(b) - h * h * k * 0.25
}

struct Scene<'a> {
    cfg: &'a SynthConfig,
    tuft: Option<Bump>,
    k: f64,
    light: Vec3,
    texture: [(Vec3, f64); 4],
}

impl<'a> Scene<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        let tuft = (cfg.asymmetry > 0.0).then(|| Bump {
            center: [0.35, -0.72, 0.1],
            radius: cfg.tuft_radius(),
            side: if cfg.asymmetry_side == Side::Both { Side::Right } else { cfg.asymmetry_side },
        });
        let min_r = cfg
            .radii
            .iter()
            .chain(cfg.ears.iter().chain(cfg.nose.iter()).chain(tuft.iter()).map(|b| &b.radius))
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let texture = std::array::from_fn(|_| {
            let k = Vec3::new(rng.gen_range(2.0..9.0), rng.gen_range(2.0..9.0), rng.gen_range(2.0..9.0));
            (k, rng.gen_range(0.0..std::f64::consts::TAU))
        });
        Self {
            cfg,
            tuft,
            k: 0.05 * min_r,
            light: Vec3::from(cfg.light).normalize(),
            texture,
        }
    }

    fn head_sdf(&self, p: &Vec3) -> f64 {
        let r = Vec3::from(self.cfg.radii);
        let k0 = p.component_div(&r).norm();
        let k1 = p.component_div(&r.component_mul(&r)).norm();
        if k1 == 0.0 {
            return -r.min();
        }
        k0 * (k0 - 1.0) / k1
    }

    fn parts(&self, p: &Vec3) -> impl Iterator<Item = (Part, f64)> + '_ {
        let p = *p;
        std::iter::once((Part::Head, self.head_sdf(&p)))
            .chain(self.cfg.ears.iter().map(move |b| (Part::Ear, sphere_sdf(&p, b))))
            .chain(self.cfg.nose.iter().map(move |b| (Part::Nose, sphere_sdf(&p, b))))
            .chain(self.tuft.iter().map(move |b| (Part::Tuft, sphere_sdf(&p, b))))
    }

    fn sdf(&self, p: &Vec3) -> f64 {
        let mut it = self.parts(p);
        let first = it.next().unwrap().1;
        it.fold(first, |acc, (_, d)| smin(acc, d, self.k))
    }

    fn nearest_part(&self, p: &Vec3) -> Part {
        self.parts(p).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0
    }

    fn normal(&self, p: &Vec3) -> Vec3 {
        let h = NORMAL_H;
        let d = |o: Vec3| self.sdf(&(p + o)) - self.sdf(&(p - o));
        Vec3::new(d(Vec3::new(h, 0.0, 0.0)), d(Vec3::new(0.0, h, 0.0)), d(Vec3::new(0.0, 0.0, h))).normalize()
    }

    fn trace(&self, origin: &Vec3, dir: &Vec3) -> Option<Vec3> {
        let mut t = 0.0;
        for _ in 0..MAX_STEPS {
            let p = origin + dir * t;
            let d = self.sdf(&p);
            if d < SURFACE_EPS {
                return Some(p);
            }
            t += RELAX * d;
            if t > FAR {
                return None;
            }
        }
        None
    }

    fn albedo(&self, p: &Vec3) -> [f64; 3] {
        let base = match self.nearest_part(p) {
            Part::Tuft => [0.25, 0.17, 0.12],
            Part::Head if p.y < -0.45 => [0.25, 0.17, 0.12],
            Part::Head => [0.86, 0.66, 0.55],
            Part::Ear | Part::Nose => [0.74, 0.46, 0.42],
        };
        let q = Vec3::new(p.x.abs(), p.y, p.z);
        let t: f64 = self.texture.iter().map(|(k, phase)| (k.dot(&q) + phase).sin()).sum::<f64>() / 4.0;
        base.map(|c| (c * (1.0 + 0.12 * t)).clamp(0.0, 1.0))
    }

    fn shade(&self, p: &Vec3, n: &Vec3) -> [f64; 3] {
        let lambert = n.dot(&self.light).max(0.0);
        self.albedo(p).map(|a| (a * (0.3 + 0.7 * lambert)).clamp(0.0, 1.0))
    }
}

/// Rasters of one synthetic view. `hits` holds the world-space surface point
/// per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthView {
    pub camera: Camera,
    pub color: GeomImage,
    pub depth: GeomImage,
    pub normal: GeomImage,
    pub mask: GeomImage,
    pub hits: Vec<Option<Vec3>>,
}

/// Renders the scene from `camera`. Pixels are sampled at their centers;
/// normals are in the camera frame.
pub fn synth_scene(cfg: &SynthConfig, camera: &Camera) -> Result<SynthView> {
    cfg.validate()?;
    let scene = Scene::new(cfg);
    let origin = camera.center();
    if scene.sdf(&origin) <= 0.0 {
        return Err(Error::invalid("camera is inside the synthetic surface"));
    }
    let (w, h) = (camera.width, camera.height);
    let rot = camera.rotation_matrix();
    let rows: Vec<Vec<Option<(Vec3, Vec3, [f64; 3])>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let dir = camera.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
                    scene.trace(&origin, &dir).map(|p| {
                        let n = scene.normal(&p);
                        (p, n, scene.shade(&p, &n))
                    })
                })
                .collect()
        })
        .collect();
    let mut color = GeomImage::new(w, h, 3, ImageKind::Color);
    let mut depth = GeomImage::new(w, h, 1, ImageKind::Depth);
    let mut normal = GeomImage::new(w, h, 3, ImageKind::Normal);
    let mut mask = GeomImage::new(w, h, 1, ImageKind::Mask);
    let mut hits = vec![None; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, hit) in row.into_iter().enumerate() {
            let Some((p, n, c)) = hit else { continue };
            let nc = rot * n;
            for ch in 0..3 {
                color.set(x, y, ch, c[ch]);
                normal.set(x, y, ch, nc[ch]);
            }
            depth.set(x, y, 0, camera.world_to_camera(&p).z);
            mask.set(x, y, 0, 1.0);
            hits[y * w + x] = Some(p);
        }
    }
    Ok(SynthView {
        camera: camera.clone(),
        color,
        depth,
        normal,
        mask,
        hits,
    })
}

/// Frontal view of the configured scene.
pub fn synth_frontal(cfg: &SynthConfig) -> Result<SynthView> {
    synth_scene(cfg, &cfg.frontal_camera()?)
}

/// Views at `+yaw` and `-yaw` degrees orbiting the head center.
pub fn synth_profile_pair(cfg: &SynthConfig, yaw: f64) -> Result<(SynthView, SynthView)> {
    let base = cfg.frontal_camera()?;
    let pivot = Vec3::zeros();
    let a = synth_scene(cfg, &yaw_camera(&base, yaw, &pivot)?)?;
    let b = synth_scene(cfg, &yaw_camera(&base, -yaw, &pivot)?)?;
    Ok((a, b))
}
