//! Bilateral normal integration with a soft depth anchor, and back-projection
//! of the integrated depth into a grid point cloud.
//!
//! Every masked pixel contributes one-sided finite-difference residuals in x
//! and y against the orthographic gradients `p = -n_x / n_z`,
//! `q = -n_y / n_z`. Paired one-sided residuals `(r+, r-)` are weighted by
//! `w+ = logistic(k (r-^2 - r+^2))`, `w- = 1 - w+`, re-estimated every IRLS
//! iteration, and each weighted least-squares problem is solved with a
//! Jacobi-preconditioned conjugate gradient warm-started at the previous
//! iterate.
//!
//! The weights are the gradient of the soft minimum
//! `-(1/k) ln(exp(-k r+^2) + exp(-k r-^2))`, which is concave in the squared
//! residuals, so each weighted problem majorizes the soft-minimum energy and
//! the energy reported in [`Integration::objective_trace`] never increases.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::{GeomImage, GridPointCloud, ImageKind};
use crate::gaussians::logistic;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiniConfig {
    /// Bilateral sharpness.
    pub k: f64,
    /// Weight of the depth anchor term.
    pub data_weight: f64,
    pub irls_iters: usize,
    /// Relative residual `|b - Ax| / |b|` at which CG stops.
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    /// World size of one pixel step along (x, y) used by [`integrate_normals`].
    /// [`reconstruct`] derives per-pixel steps from the camera instead.
    pub pixel_size: [f64; 2],
}

impl Default for BiniConfig {
    fn default() -> Self {
        Self {
            k: 2.0,
            data_weight: 0.01,
            irls_iters: 20,
            cg_tol: 1e-6,
            cg_max_iters: 2000,
            pixel_size: [1.0, 1.0],
        }
    }
}

impl BiniConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) {
            return Err(Error::invalid("bilateral sharpness k must be positive"));
        }
        if !(self.data_weight >= 0.0) {
            return Err(Error::invalid("data weight must be nonnegative"));
        }
        if self.irls_iters < 1 || self.cg_max_iters < 1 {
            return Err(Error::invalid("iteration counts must be at least 1"));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::invalid("cg_tol must be positive"));
        }
        if !(self.pixel_size[0] > 0.0 && self.pixel_size[1] > 0.0) {
            return Err(Error::invalid("pixel size must be positive"));
        }
        Ok(())
    }
}

/// Smallest |n_z| admitted before gradients are formed.
pub const MIN_ABS_NZ: f64 = 1e-3;

/// `(w+, w-)` for a pair of one-sided residuals. The exponent is clamped so
/// both weights stay strictly inside (0, 1).
pub fn bilateral_weights(k: f64, r_plus: f64, r_minus: f64) -> (f64, f64) {
    let arg = (k * (r_minus * r_minus - r_plus * r_plus)).clamp(-30.0, 30.0);
    let w = logistic(arg);
    (w, 1.0 - w)
}

/// Soft minimum of two squared residuals with sharpness `k`, offset by
/// `ln 2 / k` so that it is nonnegative and equals `a` when `a == b`.
fn soft_min(k: f64, a: f64, b: f64) -> f64 {
    let m = a.min(b);
    m - ((-k * (a - b).abs()).exp().ln_1p() - std::f64::consts::LN_2) / k
}

/// Output of an integration run.
#[derive(Debug, Clone)]
pub struct Integration {
    pub depth: GeomImage,
    /// Soft-minimum energy before the first and after every IRLS iteration.
    pub objective_trace: Vec<f64>,
    pub cg_iterations: Vec<usize>,
    /// True when the normal map was flipped to face the camera.
    pub flipped_normals: bool,
}

/// Residual `z[to] - z[from] - target`.
#[derive(Debug, Clone, Copy)]
struct Term {
    from: usize,
    to: usize,
    target: f64,
}

impl Term {
    #[inline]
    fn residual(&self, z: &[f64]) -> f64 {
        z[self.to] - z[self.from] - self.target
    }
}

/// One-sided residuals of one pixel along one axis. Terms whose neighbor is
/// outside the mask are dropped; a lone surviving term keeps weight 1/2.
#[derive(Debug, Clone, Copy)]
enum Pair {
    Both(Term, Term),
    Single(Term),
}

struct Problem {
    pairs: Vec<Pair>,
    anchor: Vec<f64>,
    lambda: f64,
    k: f64,
}

impl Problem {
    fn objective(&self, z: &[f64]) -> f64 {
        let mut e = 0.0;
        for pair in &self.pairs {
            e += match pair {
                Pair::Both(p, m) => {
                    let (rp, rm) = (p.residual(z), m.residual(z));
                    soft_min(self.k, rp * rp, rm * rm)
                }
                Pair::Single(t) => {
                    let r = t.residual(z);
                    0.5 * r * r
                }
            };
        }
        e + self.lambda * z.iter().zip(&self.anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    }

    /// Weighted terms for the current iterate.
    fn weighted_terms(&self, z: &[f64]) -> Vec<(Term, f64)> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for pair in &self.pairs {
            match *pair {
                Pair::Both(p, m) => {
                    let (wp, wm) = bilateral_weights(self.k, p.residual(z), m.residual(z));
                    out.push((p, wp));
                    out.push((m, wm));
                }
                Pair::Single(t) => out.push((t, 0.5)),
            }
        }
        out
    }
}

struct WeightedSystem<'a> {
    terms: &'a [(Term, f64)],
    lambda: f64,
    n: usize,
}

impl WeightedSystem<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = self.lambda * xi;
        }
        for (t, w) in self.terms {
            let d = w * (x[t.to] - x[t.from]);
            y[t.to] += d;
            y[t.from] -= d;
        }
    }

    fn rhs(&self, anchor: &[f64]) -> Vec<f64> {
        let mut b: Vec<f64> = anchor.iter().map(|a| self.lambda * a).collect();
        for (t, w) in self.terms {
            b[t.to] += w * t.target;
            b[t.from] -= w * t.target;
        }
        b
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![self.lambda; self.n];
        for (t, w) in self.terms {
            d[t.to] += w;
            d[t.from] += w;
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned CG on `sys x = b`, starting from `x`. Returns the iteration
/// count.
fn conjugate_gradient(sys: &WeightedSystem, b: &[f64], x: &mut [f64], tol: f64, max_iters: usize) -> Result<usize> {
    let n = x.len();
    let inv_diag: Vec<f64> = sys
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();
    let b_norm = dot(b, b).sqrt();
    let threshold = tol * if b_norm > 0.0 { b_norm } else { 1.0 };

    let mut r = vec![0.0; n];
    sys.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut r_norm = dot(&r, &r).sqrt();
    if r_norm <= threshold {
        return Ok(0);
    }
    let mut zv: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, m)| a * m).collect();
    let mut p = zv.clone();
    let mut rz = dot(&r, &zv);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iters {
        sys.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        r_norm = dot(&r, &r).sqrt();
        if r_norm <= threshold {
            return Ok(it);
        }
        for i in 0..n {
            zv[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = zv[i] + beta * p[i];
        }
    }
    Err(Error::NumericalFailure {
        message: format!("conjugate gradient did not converge in {max_iters} iterations"),
        residual: r_norm / if b_norm > 0.0 { b_norm } else { 1.0 },
    })
}

fn check_inputs(depth: &GeomImage, normal: &GeomImage, mask: &GeomImage) -> Result<()> {
    if depth.channels() != 1 || mask.channels() != 1 || normal.channels() != 3 {
        return Err(Error::invalid("expected 1-channel depth/mask and 3-channel normals"));
    }
    if depth.width() != normal.width()
        || depth.height() != normal.height()
        || depth.width() != mask.width()
        || depth.height() != mask.height()
    {
        return Err(Error::invalid("depth, normal and mask rasters differ in size"));
    }
    if mask.count_set() == 0 {
        return Err(Error::invalid("mask has no valid pixels"));
    }
    Ok(())
}

/// Integrates `normal` into a depth map anchored softly to `depth`, with a
/// uniform pixel step of `cfg.pixel_size`.
pub fn integrate_normals(depth: &GeomImage, normal: &GeomImage, mask: &GeomImage, cfg: &BiniConfig) -> Result<GeomImage> {
    integrate_normals_report(depth, normal, mask, cfg).map(|r| r.depth)
}

pub fn integrate_normals_report(
    depth: &GeomImage,
    normal: &GeomImage,
    mask: &GeomImage,
    cfg: &BiniConfig,
) -> Result<Integration> {
    let [sx, sy] = cfg.pixel_size;
    integrate(depth, normal, mask, cfg, None, |_| (sx, sy))
}

/// Same as [`integrate_normals_report`] but with the pixel step of each pixel
/// set to its anchor depth over the focal length.
pub fn integrate_normals_perspective(
    depth: &GeomImage,
    normal: &GeomImage,
    mask: &GeomImage,
    camera: &Camera,
    cfg: &BiniConfig,
) -> Result<Integration> {
    let (fx, fy) = (camera.fx, camera.fy);
    integrate(depth, normal, mask, cfg, None, |z0| (z0 / fx, z0 / fy))
}

/// Solves with frozen uniform weights `w+ = w- = 1/2` instead of IRLS.
pub fn integrate_normals_uniform(
    depth: &GeomImage,
    normal: &GeomImage,
    mask: &GeomImage,
    cfg: &BiniConfig,
) -> Result<Integration> {
    let [sx, sy] = cfg.pixel_size;
    integrate(depth, normal, mask, cfg, Some(0.5), |_| (sx, sy))
}

/// Soft-minimum energy of a candidate depth map (masked pixels only).
pub fn bilateral_objective(
    candidate: &GeomImage,
    anchor: &GeomImage,
    normal: &GeomImage,
    mask: &GeomImage,
    cfg: &BiniConfig,
) -> Result<f64> {
    check_inputs(anchor, normal, mask)?;
    let [sx, sy] = cfg.pixel_size;
    let (problem, cells, _) = build_problem(anchor, normal, mask, cfg, |_| (sx, sy));
    let z: Vec<f64> = cells.iter().map(|&i| candidate.data()[i]).collect();
    Ok(problem.objective(&z))
}

fn build_problem(
    depth: &GeomImage,
    normal: &GeomImage,
    mask: &GeomImage,
    cfg: &BiniConfig,
    step: impl Fn(f64) -> (f64, f64),
) -> (Problem, Vec<usize>, bool) {
    let (w, h) = (depth.width(), depth.height());
    let mut unknown = vec![usize::MAX; w * h];
    let mut cells = Vec::new();
    for i in 0..w * h {
        if mask.data()[i] != 0.0 {
            unknown[i] = cells.len();
            cells.push(i);
        }
    }
    let n = normal.data();
    let facing_away = cells.iter().filter(|&&i| n[3 * i + 2] > 0.0).count();
    let flip = 2 * facing_away > cells.len();
    if flip {
        log::warn!("normal map faces away from the camera; flipping {} normals", cells.len());
    }
    let sign = if flip { -1.0 } else { 1.0 };

    let anchor: Vec<f64> = cells.iter().map(|&i| depth.data()[i]).collect();
    let mut pairs = Vec::with_capacity(cells.len() * 2);
    for (k, &i) in cells.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let nx = sign * n[3 * i];
        let ny = sign * n[3 * i + 1];
        let mut nz = sign * n[3 * i + 2];
        if nz.abs() < MIN_ABS_NZ {
            nz = if nz > 0.0 { MIN_ABS_NZ } else { -MIN_ABS_NZ };
        }
        let (step_x, step_y) = step(anchor[k]);
        let p = -nx / nz * step_x;
        let q = -ny / nz * step_y;

        let right = (x + 1 < w).then(|| unknown[i + 1]).filter(|u| *u != usize::MAX);
        let left = (x > 0).then(|| unknown[i - 1]).filter(|u| *u != usize::MAX);
        let down = (y + 1 < h).then(|| unknown[i + w]).filter(|u| *u != usize::MAX);
        let up = (y > 0).then(|| unknown[i - w]).filter(|u| *u != usize::MAX);

        for (fwd, bwd, target) in [(right, left, p), (down, up, q)] {
            let plus = fwd.map(|j| Term { from: k, to: j, target });
            let minus = bwd.map(|j| Term { from: j, to: k, target });
            match (plus, minus) {
                (Some(a), Some(b)) => pairs.push(Pair::Both(a, b)),
                (Some(t), None) | (None, Some(t)) => pairs.push(Pair::Single(t)),
                (None, None) => {}
            }
        }
    }
    (
        Problem {
            pairs,
            anchor,
            lambda: cfg.data_weight,
            k: cfg.k,
        },
        cells,
        flip,
    )
}

fn integrate(
    depth: &GeomImage,
    normal: &GeomImage,
    mask: &GeomImage,
    cfg: &BiniConfig,
    frozen_weight: Option<f64>,
    step: impl Fn(f64) -> (f64, f64),
) -> Result<Integration> {
    cfg.validate()?;
    check_inputs(depth, normal, mask)?;
    let (problem, cells, flipped) = build_problem(depth, normal, mask, cfg, step);

    let mut z = problem.anchor.clone();
    let mut objective_trace = vec![problem.objective(&z)];
    let mut cg_iterations = Vec::new();
    let iters = if frozen_weight.is_some() { 1 } else { cfg.irls_iters };
    for _ in 0..iters {
        let terms = match frozen_weight {
            Some(w) => problem
                .pairs
                .iter()
                .flat_map(|p| match *p {
                    Pair::Both(a, b) => vec![(a, w), (b, 1.0 - w)],
                    Pair::Single(t) => vec![(t, 0.5)],
                })
                .collect(),
            None => problem.weighted_terms(&z),
        };
        let sys = WeightedSystem {
            terms: &terms,
            lambda: problem.lambda,
            n: z.len(),
        };
        let b = sys.rhs(&problem.anchor);
        let it = conjugate_gradient(&sys, &b, &mut z, cfg.cg_tol, cfg.cg_max_iters)?;
        cg_iterations.push(it);
        objective_trace.push(problem.objective(&z));
    }

    let mut out = depth.clone();
    for (k, &i) in cells.iter().enumerate() {
        out.data_mut()[i] = z[k];
    }
    Ok(Integration {
        depth: out,
        objective_trace,
        cg_iterations,
        flipped_normals: flipped,
    })
}

/// Back-projects every masked pixel center through `camera`.
pub fn backproject_grid(depth: &GeomImage, mask: &GeomImage, camera: &Camera) -> Result<GridPointCloud> {
    if depth.channels() != 1 || mask.channels() != 1 {
        return Err(Error::invalid("backprojection needs 1-channel depth and mask"));
    }
    if depth.width() != mask.width() || depth.height() != mask.height() {
        return Err(Error::invalid("depth and mask differ in size"));
    }
    let (w, h) = (depth.width(), depth.height());
    let mut cloud = GridPointCloud::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if !mask.is_set(x, y) {
                continue;
            }
            let d = depth.get(x, y, 0);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::invalid(format!("nonpositive depth {d} at masked pixel ({x}, {y})")));
            }
            let p = camera.unproject(x as f64 + 0.5, y as f64 + 0.5, d)?;
            cloud.set(y * w + x, p);
        }
    }
    Ok(cloud)
}

/// Integrated depth and its back-projection.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub cloud: GridPointCloud,
    pub integration: Integration,
}

/// Normal integration followed by back-projection: depth, normals and mask in,
/// coarse point cloud out.
pub fn reconstruct(
    depth: &GeomImage,
    normal: &GeomImage,
    mask: &GeomImage,
    camera: &Camera,
    cfg: &BiniConfig,
) -> Result<Reconstruction> {
    if depth.kind() != ImageKind::Depth && depth.kind() != ImageKind::Feature {
        log::debug!("reconstruct: depth raster tagged {:?}", depth.kind());
    }
    let integration = integrate_normals_perspective(depth, normal, mask, camera, cfg)?;
    let cloud = backproject_grid(&integration.depth, mask, camera)?;
    Ok(Reconstruction { cloud, integration })
}
