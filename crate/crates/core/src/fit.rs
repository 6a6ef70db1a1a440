//! Image losses, quality metrics and the gradient-descent fitting loops.
//!
//! The training objective compares two renders against ground truth: the
//! pre-densification render `I_c` and the densified render `I_tgt`.
//!
//! `total = L1(I_c) + L1(I_tgt) + lambda_p * (edge(I_c) + edge(I_tgt))
//!          + lambda_ssim * (1 - ssim(I_tgt))`

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussians::{concat, densify, GaussianCloud, COLOR_DIM};
use crate::geom::{GeomImage, GridPointCloud, ImageKind};
use crate::regressors::{
    cell_feature, decode_symmetric, decode_visible, point_input, sym_input, Activations, Mlp, RegressorBundle,
    DECODE_OUT, OUT_COLOR, OUT_OPACITY,
};
use crate::renderer::{ColorOpacityGrad, Frame, RenderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_p: f64,
    pub lambda_ssim: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Step size at the first step; decays log-linearly to
    /// `learning_rate_final` at the last. Rates are per pixel: the gradient
    /// of the per-pixel mean loss is scaled by the mean target pixel count,
    /// and for decoder fits divided by the number of decoded Gaussians.
    pub learning_rate: f64,
    pub learning_rate_final: f64,
    /// Heavy-ball momentum coefficient in [0, 1).
    pub momentum: f64,
    pub steps: usize,
    /// Render `I_tgt` from the densified cloud (otherwise both renders use
    /// the base cloud).
    pub densify: bool,
    /// Also optimize opacity logits (Gaussian fits only).
    pub fit_opacity: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.01,
            lambda_ssim: 0.2,
            ssim_window: 11,
            ssim_sigma: 1.5,
            learning_rate: 0.05,
            learning_rate_final: 0.005,
            momentum: 0.9,
            steps: 200,
            densify: true,
            fit_opacity: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_ssim >= 0.0) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if self.ssim_window % 2 == 0 {
            return Err(Error::invalid(format!("ssim_window must be odd, got {}", self.ssim_window)));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::invalid("ssim_sigma must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate_final > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.learning_rate;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.learning_rate * (self.learning_rate_final / self.learning_rate).powf(t)
    }
}

fn check_pair(a: &GeomImage, b: &GeomImage) -> Result<()> {
    a.check_same_shape(b, "image pair")?;
    if a.data().is_empty() {
        return Err(Error::invalid("images are empty"));
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(a: &GeomImage, b: &GeomImage) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.data().len() as f64)
}

fn l1_grad(a: &GeomImage, b: &GeomImage, scale: f64, out: &mut [f64]) {
    let n = a.data().len() as f64;
    for ((o, x), y) in out.iter_mut().zip(a.data()).zip(b.data()) {
        *o += scale * sign(x - y) / n;
    }
}

/// Mean absolute difference between the forward-difference gradients of two
/// images, over both axes and all channels.
pub fn edge_loss(a: &GeomImage, b: &GeomImage) -> Result<f64> {
    check_pair(a, b)?;
    Ok(edge_impl(a, b, None))
}

fn edge_impl(a: &GeomImage, b: &GeomImage, mut grad: Option<(&mut [f64], f64)>) -> f64 {
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let count = (w.saturating_sub(1) * h + w * h.saturating_sub(1)) * c;
    if count == 0 {
        return 0.0;
    }
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0;
    let n = count as f64;
    let mut pair = |i: usize, j: usize| {
        let r = (da[j] - da[i]) - (db[j] - db[i]);
        sum += r.abs();
        if let Some((g, scale)) = grad.as_mut() {
            let s = *scale * sign(r) / n;
            g[j] += s;
            g[i] -= s;
        }
    };
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                if x + 1 < w {
                    pair(i, i + c);
                }
                if y + 1 < h {
                    pair(i, i + w * c);
                }
            }
        }
    }
    sum / n
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "same" convolution of one plane with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean local SSIM over pixels and channels, Gaussian-weighted window with
/// zero padding.
pub fn ssim(a: &GeomImage, b: &GeomImage, cfg: &LossConfig) -> Result<f64> {
    check_pair(a, b)?;
    cfg.validate()?;
    Ok(ssim_impl(a, b, cfg, None))
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &GeomImage, b: &GeomImage, cfg: &LossConfig) -> Result<(f64, GeomImage)> {
    check_pair(a, b)?;
    cfg.validate()?;
    let mut g = GeomImage::new(a.width(), a.height(), a.channels(), a.kind());
    let v = ssim_impl(a, b, cfg, Some((g.data_mut(), 1.0)));
    Ok((v, g))
}

fn ssim_impl(a: &GeomImage, b: &GeomImage, cfg: &LossConfig, mut grad: Option<(&mut [f64], f64)>) -> f64 {
    let (w, h, c) = (a.width(), a.height(), a.channels());
    let k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let n = (w * h * c) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..w * h).map(|i| a.data()[i * c + ch]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.data()[i * c + ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h, &k), blur(&y, w, h, &k));
        let (mxx, myy, mxy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));
        let mut d_mu = vec![0.0; w * h];
        let mut d_m2 = vec![0.0; w * h];
        let mut d_mxy = vec![0.0; w * h];
        for i in 0..w * h {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (mxy[i] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (mxx[i] - ux * ux) + (myy[i] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if grad.is_some() {
                d_mu[i] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                d_m2[i] = -s / b2;
                d_mxy[i] = 2.0 * s / a2;
            }
        }
        if let Some((g, scale)) = grad.as_mut() {
            // the zero-padded symmetric blur is self-adjoint
            let (bu, b2, bxy) = (blur(&d_mu, w, h, &k), blur(&d_m2, w, h, &k), blur(&d_mxy, w, h, &k));
            for i in 0..w * h {
                g[i * c + ch] += *scale * (bu[i] + 2.0 * x[i] * b2[i] + y[i] * bxy[i]) / n;
            }
        }
    }
    total / n
}

/// `10 log10(1 / MSE)` on [0, 1] images; identical images give 999.0.
pub fn psnr(a: &GeomImage, b: &GeomImage) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub const PSNR_IDENTICAL: f64 = 999.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR restricted to pixels where `mask` is set.
pub fn psnr_masked(a: &GeomImage, b: &GeomImage, mask: &[bool]) -> Result<f64> {
    check_pair(a, b)?;
    if mask.len() != a.pixel_count() {
        return Err(Error::invalid("mask length does not match the image"));
    }
    let c = a.channels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, m) in mask.iter().enumerate() {
        if *m {
            for ch in 0..c {
                sum += (a.data()[p * c + ch] - b.data()[p * c + ch]).powi(2);
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::invalid("mask selects no pixels"));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

/// Raw loss components; `total` applies the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1_c: f64,
    pub l1_tgt: f64,
    pub edge_c: f64,
    pub edge_tgt: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: LossBreakdown,
    pub grad_c: GeomImage,
    pub grad_tgt: GeomImage,
}

/// Training objective with gradients with respect to both rendered images.
pub fn total_loss(i_c: &GeomImage, i_tgt: &GeomImage, gt: &GeomImage, cfg: &LossConfig) -> Result<LossEval> {
    check_pair(i_c, gt)?;
    check_pair(i_tgt, gt)?;
    cfg.validate()?;
    let mut grad_c = GeomImage::new(gt.width(), gt.height(), gt.channels(), ImageKind::Color);
    let mut grad_tgt = grad_c.clone();
    let l1_c = l1_loss(i_c, gt)?;
    let l1_tgt = l1_loss(i_tgt, gt)?;
    l1_grad(i_c, gt, 1.0, grad_c.data_mut());
    l1_grad(i_tgt, gt, 1.0, grad_tgt.data_mut());
    let edge_c = edge_impl(i_c, gt, Some((grad_c.data_mut(), cfg.lambda_p)));
    let edge_tgt = edge_impl(i_tgt, gt, Some((grad_tgt.data_mut(), cfg.lambda_p)));
    let ssim = ssim_impl(i_tgt, gt, cfg, Some((grad_tgt.data_mut(), -cfg.lambda_ssim)));
    let total = l1_c + l1_tgt + cfg.lambda_p * (edge_c + edge_tgt) + cfg.lambda_ssim * (1.0 - ssim);
    Ok(LossEval {
        loss: LossBreakdown {
            total,
            l1_c,
            l1_tgt,
            edge_c,
            edge_tgt,
            ssim,
        },
        grad_c,
        grad_tgt,
    })
}

/// One row of the loss trace CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub l1_c: f64,
    pub l1_tgt: f64,
    /// Weighted edge term.
    pub edge: f64,
    /// Weighted SSIM term.
    pub ssim_term: f64,
}

impl LossRecord {
    pub fn new(step: usize, l: &LossBreakdown, cfg: &LossConfig) -> Self {
        Self {
            step,
            total: l.total,
            l1_c: l.l1_c,
            l1_tgt: l.l1_tgt,
            edge: cfg.lambda_p * (l.edge_c + l.edge_tgt),
            ssim_term: cfg.lambda_ssim * (1.0 - l.ssim),
        }
    }
}

pub fn write_trace_csv<W: std::io::Write>(out: W, trace: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in trace {
        w.serialize(r).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Means of consecutive `window`-step blocks of the total loss.
pub fn smoothed_totals(trace: &[LossRecord], window: usize) -> Vec<f64> {
    trace
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().map(|r| r.total).sum::<f64>() / c.len() as f64)
        .collect()
}

/// A target view for fitting.
#[derive(Debug, Clone)]
pub struct TargetView {
    pub camera: Camera,
    pub image: GeomImage,
}

/// View-averaged loss of `cloud` and its color/opacity gradient.
pub fn evaluate(
    cloud: &GaussianCloud,
    targets: &[TargetView],
    cfg: &LossConfig,
    render: &RenderConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, ColorOpacityGrad)> {
    if targets.is_empty() {
        return Err(Error::invalid("fitting needs at least one target view"));
    }
    let n = cloud.len();
    let dense = if cfg.densify { Some(densify(cloud)?) } else { None };
    let mut acc = LossBreakdown::default();
    let mut grad = ColorOpacityGrad::zeros(n);
    let inv = 1.0 / targets.len() as f64;
    for view in targets {
        if view.camera.width != view.image.width() || view.camera.height != view.image.height() {
            return Err(Error::invalid("target image does not match its camera"));
        }
        let frame_c = Frame::new(cloud, &view.camera, render)?;
        let i_c = frame_c.render().color;
        let frame_t = match &dense {
            Some(d) => Some(Frame::new(d, &view.camera, render)?),
            None => None,
        };
        let i_tgt = match &frame_t {
            Some(f) => f.render().color,
            None => i_c.clone(),
        };
        let eval = total_loss(&i_c, &i_tgt, &view.image, cfg)?;
        for (dst, src) in [
            (&mut acc.total, eval.loss.total),
            (&mut acc.l1_c, eval.loss.l1_c),
            (&mut acc.l1_tgt, eval.loss.l1_tgt),
            (&mut acc.edge_c, eval.loss.edge_c),
            (&mut acc.edge_tgt, eval.loss.edge_tgt),
            (&mut acc.ssim, eval.loss.ssim),
        ] {
            *dst += inv * src;
        }
        if !with_grad {
            continue;
        }
        let mut g_c = eval.grad_c;
        let mut g_t = eval.grad_tgt;
        g_c.data_mut().iter_mut().for_each(|v| *v *= inv);
        g_t.data_mut().iter_mut().for_each(|v| *v *= inv);
        match (&frame_t, &dense) {
            (Some(f), Some(d)) => {
                grad.add_assign(&frame_c.backward(&g_c, n)?);
                let gd = f.backward(&g_t, d.len())?;
                // children copy their parent's color and opacity
                for i in 0..n {
                    for half in [i, n + i] {
                        for k in 0..COLOR_DIM {
                            grad.color[i][k] += gd.color[half][k];
                        }
                        grad.opacity_logit[i] += gd.opacity_logit[half];
                    }
                }
            }
            _ => {
                g_c.data_mut().iter_mut().zip(g_t.data()).for_each(|(a, b)| *a += b);
                grad.add_assign(&frame_c.backward(&g_c, n)?);
            }
        }
    }
    Ok((acc, grad))
}

fn check_finite(l: &LossBreakdown, step: usize) -> Result<()> {
    if l.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step })
    }
}

/// Heavy-ball SGD over a flat parameter list.
struct Sgd {
    velocity: Vec<f64>,
    momentum: f64,
    pixel_scale: f64,
}

impl Sgd {
    /// `shared` is the number of Gaussians each parameter feeds.
    fn new(n: usize, cfg: &LossConfig, targets: &[TargetView], shared: usize) -> Self {
        let pixels = targets.iter().map(|t| t.image.pixel_count() as f64).sum::<f64>() / targets.len().max(1) as f64;
        Self {
            velocity: vec![0.0; n],
            momentum: cfg.momentum,
            pixel_scale: pixels / shared.max(1) as f64,
        }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grad: impl Iterator<Item = f64>, lr: f64) {
        for ((p, g), v) in params.zip(grad).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + self.pixel_scale * g;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub cloud: GaussianCloud,
    /// Loss before each step, then the final loss at index `steps`.
    pub trace: Vec<LossRecord>,
}

/// SGD with momentum on the color coefficients and opacity logits of `init`.
pub fn fit_gaussians(
    init: &GaussianCloud,
    targets: &[TargetView],
    cfg: &LossConfig,
    render: &RenderConfig,
) -> Result<GaussianFit> {
    cfg.validate()?;
    if init.is_empty() {
        return Err(Error::invalid("cannot fit an empty Gaussian cloud"));
    }
    let mut cloud = init.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut sgd = Sgd::new(cloud.len() * (COLOR_DIM + 1), cfg, targets, 1);
    for step in 0..cfg.steps {
        let (loss, grad) = evaluate(&cloud, targets, cfg, render, true)?;
        check_finite(&loss, step)?;
        trace.push(LossRecord::new(step, &loss, cfg));
        let lr = cfg.learning_rate_at(step);
        let opacity_grad = grad.opacity_logit.iter().map(|g| if cfg.fit_opacity { *g } else { 0.0 });
        sgd.step(
            cloud.colors.iter_mut().flatten().chain(cloud.opacity_logits.iter_mut()),
            grad.color.iter().flatten().copied().chain(opacity_grad),
            lr,
        );
        log::debug!("fit step {step}: loss {:.6}", loss.total);
    }
    let (loss, _) = evaluate(&cloud, targets, cfg, render, false)?;
    check_finite(&loss, cfg.steps)?;
    trace.push(LossRecord::new(cfg.steps, &loss, cfg));
    Ok(GaussianFit { cloud, trace })
}

/// Point sets and features consumed by the decoders.
#[derive(Debug, Clone)]
pub struct PipelineInputs {
    /// Driven visible points.
    pub points: GridPointCloud,
    /// Driven mirrored points; `None` disables symmetric completion.
    pub mirrored: Option<GridPointCloud>,
    pub features: GeomImage,
}

struct DecodeTape {
    visible: Vec<Activations>,
    sym_color: Vec<Activations>,
    sym_opacity: Vec<Activations>,
    anchors: Vec<usize>,
}

/// Visible Gaussians followed by symmetric ones.
pub fn decode_pipeline(bundle: &RegressorBundle, inputs: &PipelineInputs) -> Result<GaussianCloud> {
    Ok(decode_with_tape(bundle, inputs, false)?.0)
}

fn decode_with_tape(
    bundle: &RegressorBundle,
    inputs: &PipelineInputs,
    record: bool,
) -> Result<(GaussianCloud, DecodeTape, usize)> {
    let visible = decode_visible(&inputs.points, &inputs.features, &bundle.decode)?;
    let mut tape = DecodeTape {
        visible: Vec::new(),
        sym_color: Vec::new(),
        sym_opacity: Vec::new(),
        anchors: Vec::new(),
    };
    if record {
        for (cell, p) in inputs.points.iter_valid() {
            tape.visible.push(bundle.decode.forward_cached(&point_input(&p, &inputs.features, cell)));
        }
    }
    let n_visible = visible.len();
    let Some(mirrored) = &inputs.mirrored else {
        return Ok((visible, tape, n_visible));
    };
    let sym = decode_symmetric(&visible, &inputs.features, mirrored, &bundle.sym)?;
    if record {
        for (j, a) in sym.anchors.iter().enumerate() {
            let cell = sym.gaussians.grid_index[j].expect("symmetric Gaussians carry their cell");
            let p = sym.gaussians.positions[j];
            let feat = cell_feature(&inputs.features, cell);
            tape.sym_color.push(bundle.sym.color.forward_cached(&sym_input(&p, feat, &visible.colors[*a])));
            tape.sym_opacity
                .push(bundle.sym.opacity.forward_cached(&sym_input(&p, feat, &[visible.opacity_logits[*a]])));
        }
        tape.anchors = sym.anchors;
    }
    Ok((concat(&visible, &sym.gaussians), tape, n_visible))
}

/// Gradients of the trainable decoders (visible decoder, symmetric color and
/// opacity decoders) given per-Gaussian color/opacity gradients.
fn backprop_decoders(
    bundle: &RegressorBundle,
    tape: &DecodeTape,
    n_visible: usize,
    grad: &ColorOpacityGrad,
) -> [Vec<f64>; 3] {
    let mut g_decode = vec![0.0; bundle.decode.param_count()];
    let mut g_color = vec![0.0; bundle.sym.color.param_count()];
    let mut g_opacity = vec![0.0; bundle.sym.opacity.param_count()];
    let mut anchor_color = grad.color[..n_visible].to_vec();
    let mut anchor_opacity = grad.opacity_logit[..n_visible].to_vec();
    let c_in = bundle.sym.color.input_dim() - COLOR_DIM;
    for (j, a) in tape.anchors.iter().enumerate() {
        let gc = &grad.color[n_visible + j];
        let gi = bundle.sym.color.backward(&tape.sym_color[j], gc, &mut g_color);
        for k in 0..COLOR_DIM {
            anchor_color[*a][k] += gc[k] + gi[c_in + k];
        }
        let go = grad.opacity_logit[n_visible + j];
        let gi = bundle.sym.opacity.backward(&tape.sym_opacity[j], &[go], &mut g_opacity);
        anchor_opacity[*a] += go + gi[c_in];
    }
    let mut out = vec![0.0; DECODE_OUT];
    for (i, acts) in tape.visible.iter().enumerate() {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[OUT_OPACITY] = anchor_opacity[i];
        out[OUT_COLOR..OUT_COLOR + COLOR_DIM].copy_from_slice(&anchor_color[i]);
        bundle.decode.backward(acts, &out, &mut g_decode);
    }
    [g_decode, g_color, g_opacity]
}

fn trainable(bundle: &mut RegressorBundle) -> [&mut Mlp; 3] {
    [&mut bundle.decode, &mut bundle.sym.color, &mut bundle.sym.opacity]
}

/// Loss of the decoded pipeline and its gradient with respect to the
/// trainable decoder parameters (visible decoder, symmetric color decoder,
/// symmetric opacity decoder).
pub fn pipeline_loss_and_grad(
    bundle: &RegressorBundle,
    inputs: &PipelineInputs,
    targets: &[TargetView],
    cfg: &LossConfig,
    render: &RenderConfig,
) -> Result<(LossBreakdown, [Vec<f64>; 3])> {
    let (cloud, tape, n_visible) = decode_with_tape(bundle, inputs, true)?;
    let (loss, grad) = evaluate(&cloud, targets, cfg, render, true)?;
    Ok((loss, backprop_decoders(bundle, &tape, n_visible, &grad)))
}

#[derive(Debug, Clone)]
pub struct PipelineFit {
    pub bundle: RegressorBundle,
    pub cloud: GaussianCloud,
    pub trace: Vec<LossRecord>,
}

/// SGD with momentum on the decoder parameters through the color/opacity outputs.
pub fn fit_pipeline(
    init: &RegressorBundle,
    inputs: &PipelineInputs,
    targets: &[TargetView],
    cfg: &LossConfig,
    render: &RenderConfig,
) -> Result<PipelineFit> {
    cfg.validate()?;
    let mut bundle = init.clone();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let n_params = trainable(&mut bundle).iter().map(|n| n.params().len()).sum();
    let decoded = inputs.points.valid_count() + inputs.mirrored.as_ref().map_or(0, |m| m.valid_count());
    let mut sgd = Sgd::new(n_params, cfg, targets, decoded);
    for step in 0..cfg.steps {
        let (loss, grads) = pipeline_loss_and_grad(&bundle, inputs, targets, cfg, render)?;
        check_finite(&loss, step)?;
        trace.push(LossRecord::new(step, &loss, cfg));
        let lr = cfg.learning_rate_at(step);
        let params = trainable(&mut bundle).into_iter().flat_map(|n| n.params_mut().iter_mut());
        sgd.step(params, grads.iter().flatten().copied(), lr);
        log::debug!("pipeline step {step}: loss {:.6}", loss.total);
    }
    let cloud = decode_pipeline(&bundle, inputs)?;
    let (loss, _) = evaluate(&cloud, targets, cfg, render, false)?;
    check_finite(&loss, cfg.steps)?;
    trace.push(LossRecord::new(cfg.steps, &loss, cfg));
    Ok(PipelineFit { bundle, cloud, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Quaternion;
    use crate::gaussians::{flat_color, logit, Gaussian, Provenance};
    use crate::geom::Vec3;
    use crate::regressors::{RegressorConfig, FEATURE_DIM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GeomImage {
        let mut img = GeomImage::new(w, h, 3, ImageKind::Color);
        img.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        img
    }

    /// Direct 2D windowed SSIM with zero padding.
    fn ssim_brute(a: &GeomImage, b: &GeomImage, size: usize, sigma: f64) -> f64 {
        let r = (size / 2) as isize;
        let g1: Vec<f64> = (0..size).map(|i| (-((i as isize - r) as f64).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = g1.iter().sum();
        let (w, h, c) = (a.width() as isize, a.height() as isize, a.channels());
        let mut total = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy) = (x + dx, y + dy);
                            if xx < 0 || yy < 0 || xx >= w || yy >= h {
                                continue;
                            }
                            let wgt = g1[(dx + r) as usize] * g1[(dy + r) as usize] / (norm * norm);
                            let p = a.get(xx as usize, yy as usize, ch);
                            let q = b.get(xx as usize, yy as usize, ch);
                            mx += wgt * p;
                            my += wgt * q;
                            mxx += wgt * p * p;
                            myy += wgt * q * q;
                            mxy += wgt * p * q;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    total += ((2.0 * mx * my + c1) * (2.0 * (mxy - mx * my) + c2))
                        / ((mx * mx + my * my + c1) * (mxx - mx * mx + myy - my * my + c2));
                }
            }
        }
        total / (w * h) as f64 / c as f64
    }

    #[test]
    fn l1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 5, 4);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v += 0.5);
        assert!((l1_loss(&b, &a).unwrap() - 0.5).abs() < 1e-15);
        let c = random_image(&mut rng, 5, 4);
        let direct: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 60.0;
        assert!((l1_loss(&a, &c).unwrap() - direct).abs() < 1e-12);
        assert!(l1_loss(&a, &random_image(&mut rng, 4, 4)).is_err());
    }

    #[test]
    fn edge_cases_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 6, 5);
        assert_eq!(edge_loss(&a, &a).unwrap(), 0.0);
        let mut shifted = a.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 0.25);
        assert!(edge_loss(&a, &shifted).unwrap() < 1e-15);
        let b = random_image(&mut rng, 6, 5);
        let mut s = 0.0;
        let mut n = 0;
        for ch in 0..3 {
            for y in 0..5 {
                for x in 0..5 {
                    s += ((a.get(x + 1, y, ch) - a.get(x, y, ch)) - (b.get(x + 1, y, ch) - b.get(x, y, ch))).abs();
                    n += 1;
                }
            }
            for y in 0..4 {
                for x in 0..6 {
                    s += ((a.get(x, y + 1, ch) - a.get(x, y, ch)) - (b.get(x, y + 1, ch) - b.get(x, y, ch))).abs();
                    n += 1;
                }
            }
        }
        assert!((edge_loss(&a, &b).unwrap() - s / n as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 8, 8);
        let b = random_image(&mut rng, 8, 8);
        let cfg = LossConfig::default();
        assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
        assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
        for size in [3, 7, 11] {
            let cfg = LossConfig { ssim_window: size, ..LossConfig::default() };
            let want = ssim_brute(&a, &b, size, 1.5);
            assert!((ssim(&a, &b, &cfg).unwrap() - want).abs() < 1e-10, "window {size}");
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 9, 7);
        let b = random_image(&mut rng, 9, 7);
        let cfg = LossConfig { ssim_window: 7, ..LossConfig::default() };
        let (_, g) = ssim_with_grad(&a, &b, &cfg).unwrap();
        let h = 1e-6;
        for i in (0..a.data().len()).step_by(5) {
            let mut p = a.clone();
            p.data_mut()[i] += h;
            let mut m = a.clone();
            m.data_mut()[i] -= h;
            let fd = (ssim(&p, &b, &cfg).unwrap() - ssim(&m, &b, &cfg).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-7 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn total_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_image(&mut rng, 8, 6);
        let cfg = LossConfig::default();
        let same = total_loss(&gt, &gt, &gt, &cfg).unwrap();
        assert_eq!(same.loss.total, 0.0);
        assert!(same.grad_c.data().iter().chain(same.grad_tgt.data()).all(|v| v.abs() < 1e-15));
        let (a, b) = (random_image(&mut rng, 8, 6), random_image(&mut rng, 8, 6));
        let zero = LossConfig { lambda_p: 0.0, lambda_ssim: 0.0, ..cfg.clone() };
        let t = total_loss(&a, &b, &gt, &zero).unwrap().loss.total;
        assert!((t - (l1_loss(&a, &gt).unwrap() + l1_loss(&b, &gt).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_image(&mut rng, 7, 6);
        let (a, b) = (random_image(&mut rng, 7, 6), random_image(&mut rng, 7, 6));
        let cfg = LossConfig { ssim_window: 5, ..LossConfig::default() };
        let e = total_loss(&a, &b, &gt, &cfg).unwrap();
        let h = 1e-7;
        for i in (0..b.data().len()).step_by(7) {
            let mut p = b.clone();
            p.data_mut()[i] += h;
            let mut m = b.clone();
            m.data_mut()[i] -= h;
            let fd = (total_loss(&a, &p, &gt, &cfg).unwrap().loss.total - total_loss(&a, &m, &gt, &cfg).unwrap().loss.total)
                / (2.0 * h);
            assert!((fd - e.grad_tgt.data()[i]).abs() < 1e-6, "{i}");
            let mut p = a.clone();
            p.data_mut()[i] += h;
            let mut m = a.clone();
            m.data_mut()[i] -= h;
            let fd = (total_loss(&p, &b, &gt, &cfg).unwrap().loss.total - total_loss(&m, &b, &gt, &cfg).unwrap().loss.total)
                / (2.0 * h);
            assert!((fd - e.grad_c.data()[i]).abs() < 1e-6, "{i}");
        }
    }

    #[test]
    fn psnr_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(&mut rng, 4, 4);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_IDENTICAL);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v += 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let mut mask = vec![false; 16];
        mask[3] = true;
        assert!((psnr_masked(&a, &b, &mask).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr_masked(&a, &b, &[false; 16]).is_err());
    }

    #[test]
    fn learning_rate_schedule_endpoints() {
        let cfg = LossConfig { learning_rate: 2.0, learning_rate_final: 0.02, steps: 11, ..LossConfig::default() };
        assert_eq!(cfg.learning_rate_at(0), 2.0);
        assert!((cfg.learning_rate_at(10) - 0.02).abs() < 1e-15);
        assert!((cfg.learning_rate_at(5) - 0.2).abs() < 1e-12);
    }

    fn one_gaussian(rgb: [f64; 3]) -> GaussianCloud {
        let mut c = GaussianCloud::new();
        c.push(
            Gaussian {
                position: Vec3::zeros(),
                rotation: Quaternion::IDENTITY,
                log_scale: [0.3f64.ln(); 3],
                opacity_logit: logit(0.9),
                color: flat_color(rgb),
            },
            Provenance::Visible,
            None,
        );
        c
    }

    fn view_of(cloud: &GaussianCloud, camera: &Camera) -> TargetView {
        TargetView {
            camera: camera.clone(),
            image: crate::renderer::render(cloud, camera, &RenderConfig::default()).unwrap().color,
        }
    }

    #[test]
    fn perfect_initialization_is_a_fixed_point() {
        let cam = Camera::frontal(24, 24, 24.0, 3.0).unwrap();
        let g = one_gaussian([0.3, 0.6, 0.2]);
        let cfg = LossConfig { steps: 10, densify: false, ..LossConfig::default() };
        let fit = fit_gaussians(&g, &[view_of(&g, &cam)], &cfg, &RenderConfig::default()).unwrap();
        assert!(fit.trace.iter().all(|r| r.total.abs() < 1e-12));
        for k in 0..COLOR_DIM {
            assert!((fit.cloud.colors[0][k] - g.colors[0][k]).abs() < 1e-6);
        }
        assert!((fit.cloud.opacity_logits[0] - g.opacity_logits[0]).abs() < 1e-6);
    }

    #[test]
    fn single_gaussian_color_fit_converges() {
        let cam = Camera::frontal(24, 24, 24.0, 3.0).unwrap();
        let target_rgb = [0.8, 0.25, 0.4];
        let target = view_of(&one_gaussian(target_rgb), &cam);
        let init = one_gaussian([0.5, 0.5, 0.5]);
        let cfg = LossConfig {
            steps: 200,
            densify: false,
            fit_opacity: false,
            learning_rate: 0.01,
            learning_rate_final: 1e-4,
            momentum: 0.0,
            ..LossConfig::default()
        };
        let fit = fit_gaussians(&init, &[target], &cfg, &RenderConfig::default()).unwrap();
        let view = (fit.cloud.positions[0] - cam.center()).normalize();
        let rgb = crate::gaussians::eval_color(&fit.cloud.colors[0], &view);
        for ch in 0..3 {
            assert!((rgb[ch] - target_rgb[ch]).abs() < 1e-3, "{rgb:?}");
        }
    }

    #[test]
    fn trace_csv_header() {
        let r = LossRecord { step: 0, total: 1.0, l1_c: 0.5, l1_tgt: 0.25, edge: 0.125, ssim_term: 0.125 };
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[r]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,total,l1_c,l1_tgt,edge,ssim_term\n0,1.0,"));
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (4, 3);
        let cam = Camera::frontal(16, 16, 16.0, 3.0).unwrap();
        let mut points = GridPointCloud::empty(w, h);
        for cell in 0..w * h {
            if cell % 5 != 0 {
                points.set(
                    cell,
                    Vec3::new(rng.gen_range(0.05..0.6), rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.2)),
                );
            }
        }
        let mut mirrored = crate::symmetry::mirror_x(&points);
        mirrored.invalidate(1);
        let mut features = GeomImage::new(w, h, FEATURE_DIM, ImageKind::Feature);
        features.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let inputs = PipelineInputs { points, mirrored: Some(mirrored), features };
        let mut bundle = RegressorBundle::new(&RegressorConfig { hidden: vec![6], expression_dim: 2, seed: 3, ..Default::default() });
        for net in trainable(&mut bundle) {
            let fresh = Mlp::new(net.widths(), 77);
            net.params_mut().iter_mut().zip(fresh.params()).for_each(|(p, f)| *p = 0.3 * f);
        }
        // geometric decoder outputs receive no gradient and stay at their bias
        for unit in 0..OUT_OPACITY {
            bundle.decode.clear_output_unit(unit);
        }
        bundle.set_decoder_prior(0.15f64.ln(), 1.0);
        let mut target = GeomImage::new(16, 16, 3, ImageKind::Color);
        target.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let targets = [TargetView { camera: cam, image: target }];
        let cfg = LossConfig { ssim_window: 5, ..LossConfig::default() };
        let rc = RenderConfig::default();
        let (_, grads) = pipeline_loss_and_grad(&bundle, &inputs, &targets, &cfg, &rc).unwrap();
        let hstep = 1e-6;
        for (net_idx, g) in grads.iter().enumerate() {
            let net = &trainable(&mut bundle.clone())[net_idx].clone();
            let (fan_in, n_out) = (net.widths()[net.widths().len() - 2], net.output_dim());
            let last = net.param_count() - (fan_in + 1) * n_out;
            for i in (0..g.len()).step_by(3) {
                if net_idx == 0 && i >= last {
                    let unit = if i < last + fan_in * n_out { (i - last) / fan_in } else { i - last - fan_in * n_out };
                    if unit < OUT_OPACITY {
                        assert_eq!(g[i], 0.0);
                        continue;
                    }
                }
                let mut p = bundle.clone();
                trainable(&mut p)[net_idx].params_mut()[i] += hstep;
                let mut m = bundle.clone();
                trainable(&mut m)[net_idx].params_mut()[i] -= hstep;
                let eval = |b: &RegressorBundle| {
                    evaluate(&decode_pipeline(b, &inputs).unwrap(), &targets, &cfg, &rc, false).unwrap().0.total
                };
                let fd = (eval(&p) - eval(&m)) / (2.0 * hstep);
                assert!(
                    (fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-4),
                    "net {net_idx} param {i}: {fd} vs {}",
                    g[i]
                );
            }
        }
    }
}
