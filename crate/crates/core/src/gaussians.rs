//! Anisotropic 3D Gaussian primitives, their activations, covariance
//! construction, view-dependent color and parent-child densification.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::camera::{quat_to_rotation, Quaternion};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Degree-0 real spherical-harmonic constant.
pub const SH_C0: f64 = 0.282_094_79;
/// Degree-1 real spherical-harmonic constant.
pub const SH_C1: f64 = 0.488_602_51;

/// Color coefficients per Gaussian: 3 channels x (1 DC + 3 linear).
pub const COLOR_DIM: usize = 12;

pub type ColorCoeffs = [f64; COLOR_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Visible,
    Symmetric,
    Child,
}

impl Provenance {
    pub fn to_u8(self) -> u8 {
        match self {
            Provenance::Visible => 0,
            Provenance::Symmetric => 1,
            Provenance::Child => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Provenance::Visible),
            1 => Some(Provenance::Symmetric),
            2 => Some(Provenance::Child),
            _ => None,
        }
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A single Gaussian with activated-parameter accessors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vec3,
    pub rotation: Quaternion,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: ColorCoeffs,
}

impl Gaussian {
    pub fn scale(&self) -> Vec3 {
        Vec3::new(self.log_scale[0].exp(), self.log_scale[1].exp(), self.log_scale[2].exp())
    }

    pub fn opacity(&self) -> f64 {
        logistic(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance(&self.rotation, &self.scale())
    }
}

/// Structure-of-arrays Gaussian set. Scales are stored as logs and opacity as
/// logits; rotations are stored as produced and normalized on use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quaternion>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<ColorCoeffs>,
    pub provenance: Vec<Provenance>,
    pub grid_index: Vec<Option<usize>>,
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            provenance: Vec::with_capacity(n),
            grid_index: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian, provenance: Provenance, grid_index: Option<usize>) {
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.colors.push(g.color);
        self.provenance.push(provenance);
        self.grid_index.push(grid_index);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            color: self.colors[i],
        }
    }

    /// Checks equal field lengths, finiteness and usable rotations.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.rotations.len(),
            self.log_scales.len(),
            self.opacity_logits.len(),
            self.colors.len(),
            self.provenance.len(),
            self.grid_index.len(),
        ];
        if lens.iter().any(|l| *l != n) {
            return Err(Error::invalid(format!("gaussian cloud field lengths differ: {n} vs {lens:?}")));
        }
        for i in 0..n {
            let g = self.get(i);
            let finite = g.position.iter().all(|v| v.is_finite())
                && g.rotation.to_array().iter().all(|v| v.is_finite())
                && g.log_scale.iter().all(|v| v.is_finite())
                && g.opacity_logit.is_finite()
                && g.color.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::invalid(format!("gaussian {i} has non-finite parameters")));
            }
            g.rotation.normalized()?;
        }
        Ok(())
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|x| **x == p).count()
    }

    /// Splits at `at`: the first cloud holds `[0, at)`.
    pub fn split(&self, at: usize) -> (GaussianCloud, GaussianCloud) {
        let at = at.min(self.len());
        let take = |r: std::ops::Range<usize>| GaussianCloud {
            positions: self.positions[r.clone()].to_vec(),
            rotations: self.rotations[r.clone()].to_vec(),
            log_scales: self.log_scales[r.clone()].to_vec(),
            opacity_logits: self.opacity_logits[r.clone()].to_vec(),
            colors: self.colors[r.clone()].to_vec(),
            provenance: self.provenance[r.clone()].to_vec(),
            grid_index: self.grid_index[r].to_vec(),
        };
        (take(0..at), take(at..self.len()))
    }

    fn extend_from(&mut self, other: &GaussianCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.colors.extend_from_slice(&other.colors);
        self.provenance.extend_from_slice(&other.provenance);
        self.grid_index.extend_from_slice(&other.grid_index);
    }
}

/// Sigma = R S S^T R^T for rotation `r` and per-axis scales `s`.
pub fn covariance(r: &Quaternion, s: &Vec3) -> Result<Matrix3<f64>> {
    if !s.iter().all(|v| *v > 0.0 && v.is_finite()) {
        return Err(Error::invalid(format!("scales must be positive, got {s:?}")));
    }
    let rot = quat_to_rotation(r)?;
    let m = rot * Matrix3::from_diagonal(s);
    Ok(m * m.transpose())
}

/// Degree-1 real SH basis for a unit direction: (Y0, Y1, Y2, Y3).
#[inline]
pub fn sh_basis(dir: &Vec3) -> [f64; 4] {
    [SH_C0, -SH_C1 * dir.y, SH_C1 * dir.z, -SH_C1 * dir.x]
}

/// RGB seen from `view_dir` together with a per-channel "clamp inactive" flag.
pub fn eval_color_with_mask(c: &ColorCoeffs, view_dir: &Vec3) -> ([f64; 3], [bool; 3]) {
    let basis = sh_basis(view_dir);
    let mut rgb = [0.0; 3];
    let mut live = [false; 3];
    for ch in 0..3 {
        let k = &c[ch * 4..ch * 4 + 4];
        let raw = basis[0] * k[0] + basis[1] * k[1] + basis[2] * k[2] + basis[3] * k[3] + 0.5;
        live[ch] = raw > 0.0 && raw < 1.0;
        rgb[ch] = raw.clamp(0.0, 1.0);
    }
    (rgb, live)
}

/// RGB in [0, 1] seen from unit direction `view_dir`.
pub fn eval_color(c: &ColorCoeffs, view_dir: &Vec3) -> [f64; 3] {
    eval_color_with_mask(c, view_dir).0
}

/// Color coefficients whose view-independent color is `rgb`.
pub fn flat_color(rgb: [f64; 3]) -> ColorCoeffs {
    let mut c = [0.0; COLOR_DIM];
    for ch in 0..3 {
        c[ch * 4] = (rgb[ch] - 0.5) / SH_C0;
    }
    c
}

/// Unit major principal axis of the Gaussian, signed toward +y (then +x, +z
/// when the y component vanishes).
pub fn major_axis(rotation: &Quaternion, log_scale: &[f64; 3]) -> Result<(Vec3, f64)> {
    let mut k = 0;
    for i in 1..3 {
        if log_scale[i] > log_scale[k] {
            k = i;
        }
    }
    let rot = quat_to_rotation(rotation)?;
    let mut axis: Vec3 = rot.column(k).into_owned();
    const EPS: f64 = 1e-12;
    let flip = if axis.y.abs() > EPS {
        axis.y < 0.0
    } else if axis.x.abs() > EPS {
        axis.x < 0.0
    } else {
        axis.z < 0.0
    };
    if flip {
        axis = -axis;
    }
    Ok((axis, log_scale[k].exp()))
}

/// Parent-child densification: every Gaussian spawns one child half a major
/// standard deviation along its major axis, at half scale. Output is the
/// parents (unchanged) followed by the children in parent order.
pub fn densify(g: &GaussianCloud) -> Result<GaussianCloud> {
    let mut children = GaussianCloud::with_capacity(g.len());
    for i in 0..g.len() {
        let parent = g.get(i);
        let (axis, s_max) = major_axis(&parent.rotation, &parent.log_scale)?;
        let child = Gaussian {
            position: parent.position + axis * (0.5 * s_max),
            log_scale: parent.log_scale.map(|l| l - std::f64::consts::LN_2),
            ..parent
        };
        children.push(child, Provenance::Child, g.grid_index[i]);
    }
    let mut out = g.clone();
    out.extend_from(&children);
    Ok(out)
}

/// Order-preserving concatenation.
pub fn concat(a: &GaussianCloud, b: &GaussianCloud) -> GaussianCloud {
    let mut out = a.clone();
    out.extend_from(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian {
        let mut color = [0.0; COLOR_DIM];
        color.iter_mut().for_each(|c| *c = rng.gen_range(-1.0..1.0));
        Gaussian {
            position: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            rotation: Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            log_scale: [rng.gen_range(-3.0..1.0), rng.gen_range(-3.0..1.0), rng.gen_range(-3.0..1.0)],
            opacity_logit: rng.gen_range(-4.0..4.0),
            color,
        }
    }

    #[test]
    fn covariance_identity_and_axis_aligned() {
        let i = covariance(&Quaternion::IDENTITY, &Vec3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(i, Matrix3::identity());
        let d = covariance(&Quaternion::IDENTITY, &Vec3::new(2.0, 1.0, 1.0)).unwrap();
        assert_eq!(d, Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn covariance_rejects_nonpositive_scale() {
        assert!(covariance(&Quaternion::IDENTITY, &Vec3::new(1.0, 0.0, 1.0)).is_err());
        assert!(covariance(&Quaternion::IDENTITY, &Vec3::new(1.0, -1.0, 1.0)).is_err());
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let g = random_gaussian(&mut rng);
            let s = g.scale();
            let sigma = g.covariance().unwrap();
            let mut eig: Vec<f64> = sigma.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                assert!((a - b).abs() < 1e-9, "{eig:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn activation_round_trip() {
        // Near p = 1 the logistic output itself carries only eps / (1 - p)
        // relative information, which bounds any inverse.
        let mut x = -19.95;
        while x < 20.0 {
            let p = logistic(x);
            let bound = (4.0 * f64::EPSILON / (1.0 - p)).max(1e-12);
            assert!((logit(p) - x).abs() <= bound, "{x}");
            if x < 9.0 {
                assert!((logit(p) - x).abs() <= 1e-12, "{x}");
            }
            x += 0.05;
        }
    }

    #[test]
    fn isotropic_color() {
        let c = flat_color([0.5, 0.5, 0.5]);
        for d in [Vec3::x(), -Vec3::y(), Vec3::new(1.0, 1.0, 1.0).normalize()] {
            assert_eq!(eval_color(&c, &d), [0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn linear_basis_is_odd() {
        let mut c = [0.0; COLOR_DIM];
        c[1] = 0.3;
        c[6] = -0.2;
        c[11] = 0.4;
        let d = Vec3::new(0.3, -0.5, 0.8).normalize();
        let a = eval_color(&c, &d);
        let b = eval_color(&c, &-d);
        for ch in 0..3 {
            assert!(((a[ch] - 0.5) + (b[ch] - 0.5)).abs() < 1e-15);
        }
    }

    #[test]
    fn color_matches_basis_table() {
        // Independent table: Y_1^{-1} = -C1 y, Y_1^0 = C1 z, Y_1^1 = -C1 x.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let g = random_gaussian(&mut rng);
            let c: ColorCoeffs = g.color.map(|v| v * 0.3);
            let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let got = eval_color(&c, &d);
            for ch in 0..3 {
                let table = [0.282_094_79, -0.488_602_51 * d.y, 0.488_602_51 * d.z, -0.488_602_51 * d.x];
                let v: f64 = (0..4).map(|k| table[k] * c[ch * 4 + k]).sum::<f64>() + 0.5;
                assert!((got[ch] - v.clamp(0.0, 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn densify_axis_aligned_example() {
        let mut g = GaussianCloud::new();
        g.push(
            Gaussian {
                position: Vec3::new(0.1, 0.2, 0.3),
                rotation: Quaternion::IDENTITY,
                log_scale: [2f64.ln(), 0.0, 0.0],
                opacity_logit: 0.7,
                color: [0.1; COLOR_DIM],
            },
            Provenance::Visible,
            Some(4),
        );
        let d = densify(&g).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.get(0), g.get(0));
        let child = d.get(1);
        assert!((child.position - Vec3::new(1.1, 0.2, 0.3)).norm() < 1e-15);
        let s = child.scale();
        assert!((s - Vec3::new(1.0, 0.5, 0.5)).norm() < 1e-15);
        assert_eq!(d.provenance[1], Provenance::Child);
        assert_eq!(d.grid_index[1], Some(4));
        assert_eq!(child.color, g.colors[0]);
        assert_eq!(child.opacity_logit, 0.7);
    }

    #[test]
    fn densify_size_law_and_mahalanobis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = GaussianCloud::new();
        for _ in 0..100 {
            g.push(random_gaussian(&mut rng), Provenance::Visible, None);
        }
        let d = densify(&g).unwrap();
        assert_eq!(d.len(), 200);
        assert_eq!(densify(&d).unwrap().len(), 400);
        for i in 0..100 {
            let sigma = g.get(i).covariance().unwrap();
            let off = d.positions[100 + i] - g.positions[i];
            let m = (off.transpose() * sigma.try_inverse().unwrap() * off)[0].sqrt();
            assert!((m - 0.5).abs() < 1e-9, "mahalanobis {m}");
            assert!(off.y >= 0.0);
        }
    }

    #[test]
    fn concat_and_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = GaussianCloud::new();
        let mut b = GaussianCloud::new();
        for _ in 0..3 {
            a.push(random_gaussian(&mut rng), Provenance::Visible, Some(1));
        }
        for _ in 0..5 {
            b.push(random_gaussian(&mut rng), Provenance::Symmetric, None);
        }
        assert_eq!(concat(&GaussianCloud::new(), &b), b);
        let ab = concat(&a, &b);
        assert_eq!(ab.len(), 8);
        assert_eq!(ab.count(Provenance::Symmetric), 5);
        let (a2, b2) = ab.split(3);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn provenance_codes_round_trip() {
        for p in [Provenance::Visible, Provenance::Symmetric, Provenance::Child] {
            assert_eq!(Provenance::from_u8(p.to_u8()), Some(p));
        }
        assert_eq!(Provenance::from_u8(9), None);
    }
}
