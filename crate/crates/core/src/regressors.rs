//! Per-point MLP regressors for geometry refinement, expression-driven
//! deformation, and the two-stage Gaussian decoders.
//!
//! Every stage is residual: with a zero output layer it reduces to the
//! identity (refine, deform) or to the pure symmetry prior (sym decode).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Quaternion;
use crate::error::{Error, Result};
use crate::gaussians::{ColorCoeffs, Gaussian, GaussianCloud, Provenance, COLOR_DIM};
use crate::geom::{ExpressionCoeffs, GeomImage, GridPointCloud, ImageKind, Vec3, DEFAULT_EXPRESSION_DIM};

/// Channels of the identity feature map: RGB, luminance gradients (x, y) and
/// normalized pixel coordinates (u, v).
pub const FEATURE_DIM: usize = 8;

/// Decoder output layout: log-scale 3, quaternion 4, opacity logit 1, color 12.
pub const DECODE_OUT: usize = 3 + 4 + 1 + COLOR_DIM;
pub const OUT_LOG_SCALE: usize = 0;
pub const OUT_ROTATION: usize = 3;
pub const OUT_OPACITY: usize = 7;
pub const OUT_COLOR: usize = 8;

/// Fully connected network: tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
    seed: u64,
}

/// Post-activation values of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("at least an input layer")
    }
}

impl Mlp {
    fn check_widths(widths: &[usize]) {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        assert!(widths.iter().all(|w| *w > 0), "layer widths must be positive");
    }

    pub fn param_count_for(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Uniform initialization in `+-1/sqrt(fan_in)` from `seed`.
    pub fn new(widths: &[usize], seed: u64) -> Self {
        Self::check_widths(widths);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count_for(widths));
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(rng.gen_range(-bound..bound));
            }
        }
        Self {
            widths: widths.to_vec(),
            params,
            seed,
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self::check_widths(widths);
        Self {
            widths: widths.to_vec(),
            params: vec![0.0; Self::param_count_for(widths)],
            seed: 0,
        }
    }

    /// Random hidden layers with a zeroed output layer: outputs are exactly
    /// zero but every layer still receives gradient.
    pub fn zero_output(widths: &[usize], seed: u64) -> Self {
        let mut net = Self::new(widths, seed);
        let (start, _) = net.layer_range(widths.len() - 2);
        net.params[start..].iter_mut().for_each(|p| *p = 0.0);
        net
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|w| *w == 0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        if params.len() != Self::param_count_for(widths) {
            return Err(Error::invalid(format!(
                "expected {} parameters for widths {widths:?}, got {}",
                Self::param_count_for(widths),
                params.len()
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
            seed,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter range of layer `l`: weights (out x in, row-major) then biases.
    fn layer_range(&self, l: usize) -> (usize, usize) {
        let start: usize = self.widths[..=l].windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        (start, start + (self.widths[l] + 1) * self.widths[l + 1])
    }

    /// Sets the bias of output unit `unit` on the last layer.
    pub fn set_output_bias(&mut self, unit: usize, value: f64) {
        let l = self.widths.len() - 2;
        let (_, end) = self.layer_range(l);
        let out = self.widths[l + 1];
        self.params[end - out + unit] = value;
    }

    /// Zeroes the weights and bias feeding output unit `unit`.
    pub fn clear_output_unit(&mut self, unit: usize) {
        let l = self.widths.len() - 2;
        let (start, end) = self.layer_range(l);
        let (fan_in, out) = (self.widths[l], self.widths[l + 1]);
        self.params[start + unit * fan_in..start + (unit + 1) * fan_in]
            .iter_mut()
            .for_each(|p| *p = 0.0);
        self.params[end - out + unit] = 0.0;
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = self.forward_cached(x);
        acts.layers.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64]) -> Activations {
        assert_eq!(x.len(), self.input_dim(), "MLP input width mismatch");
        let n_layers = self.widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            offset += (fan_in + 1) * fan_out;
            let input = layers.last().unwrap();
            let mut out: Vec<f64> = (0..fan_out)
                .map(|o| b[o] + w[o * fan_in..(o + 1) * fan_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            layers.push(out);
        }
        Activations { layers }
    }

    /// Reverse pass: accumulates dL/dparams into `param_grad` and returns
    /// dL/dinput.
    pub fn backward(&self, acts: &Activations, grad_out: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(param_grad.len(), self.params.len());
        assert_eq!(grad_out.len(), self.output_dim());
        let n_layers = self.widths.len() - 1;
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let (start, _) = self.layer_range(l);
            let input = &acts.layers[l];
            let w = &self.params[start..start + fan_in * fan_out];
            {
                let (gw, gb) = param_grad[start..start + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    gb[o] += delta[o];
                    for i in 0..fan_in {
                        gw[o * fan_in + i] += delta[o] * input[i];
                    }
                }
            }
            let mut below = vec![0.0; fan_in];
            for o in 0..fan_out {
                for i in 0..fan_in {
                    below[i] += w[o * fan_in + i] * delta[o];
                }
            }
            if l > 0 {
                // input to this layer is tanh of the previous pre-activation
                for (g, a) in below.iter_mut().zip(input) {
                    *g *= 1.0 - a * a;
                }
            }
            delta = below;
        }
        delta
    }
}

/// Exact gradient of `loss(outputs)` with respect to every parameter of
/// `net`, where `outputs[i] = net(inputs[i])`. `loss` returns the scalar and
/// its gradient with respect to each output vector.
pub fn grad<F>(net: &Mlp, inputs: &[Vec<f64>], loss: F) -> (f64, Vec<f64>)
where
    F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
{
    let acts: Vec<Activations> = inputs.iter().map(|x| net.forward_cached(x)).collect();
    let outputs: Vec<Vec<f64>> = acts.iter().map(|a| a.output().to_vec()).collect();
    let (value, grads) = loss(&outputs);
    let mut g = vec![0.0; net.param_count()];
    for (a, go) in acts.iter().zip(&grads) {
        net.backward(a, go, &mut g);
    }
    (value, g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub feature_dim: usize,
    pub expression_dim: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            feature_dim: FEATURE_DIM,
            expression_dim: DEFAULT_EXPRESSION_DIM,
            hidden: vec![32],
            seed: 0,
        }
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// The four offset networks of the symmetric decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SymDecoders {
    pub scale: Mlp,
    pub rotation: Mlp,
    pub color: Mlp,
    pub opacity: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorBundle {
    pub refine: Mlp,
    pub deform: Mlp,
    pub decode: Mlp,
    pub sym: SymDecoders,
}

impl RegressorBundle {
    /// All residual stages start with a zero output layer.
    pub fn new(cfg: &RegressorConfig) -> Self {
        let c = cfg.feature_dim;
        let h = &cfg.hidden;
        let s = cfg.seed;
        Self {
            refine: Mlp::zero_output(&widths(3 + c, h, 3), s),
            deform: Mlp::zero_output(&widths(3 + 2 * cfg.expression_dim, h, 3), s.wrapping_add(1)),
            decode: Mlp::zero_output(&widths(3 + c, h, DECODE_OUT), s.wrapping_add(2)),
            sym: SymDecoders {
                scale: Mlp::zero_output(&widths(3 + c + 3, h, 3), s.wrapping_add(3)),
                rotation: Mlp::zero_output(&widths(3 + c + 4, h, 4), s.wrapping_add(4)),
                color: Mlp::zero_output(&widths(3 + c + COLOR_DIM, h, COLOR_DIM), s.wrapping_add(5)),
                opacity: Mlp::zero_output(&widths(3 + c + 1, h, 1), s.wrapping_add(6)),
            },
        }
    }

    /// Output-bias prior for the visible decoder: isotropic `log_scale` and
    /// the given opacity logit when the rest of the output is zero.
    pub fn set_decoder_prior(&mut self, log_scale: f64, opacity_logit: f64) {
        for k in 0..3 {
            self.decode.set_output_bias(OUT_LOG_SCALE + k, log_scale);
        }
        self.decode.set_output_bias(OUT_OPACITY, opacity_logit);
    }

    pub fn nets(&self) -> [(&'static str, &Mlp); 7] {
        [
            ("refine", &self.refine),
            ("deform", &self.deform),
            ("decode", &self.decode),
            ("sym_scale", &self.sym.scale),
            ("sym_rotation", &self.sym.rotation),
            ("sym_color", &self.sym.color),
            ("sym_opacity", &self.sym.opacity),
        ]
    }

    pub fn nets_mut(&mut self) -> [&mut Mlp; 7] {
        [
            &mut self.refine,
            &mut self.deform,
            &mut self.decode,
            &mut self.sym.scale,
            &mut self.sym.rotation,
            &mut self.sym.color,
            &mut self.sym.opacity,
        ]
    }

    pub fn feature_dim(&self) -> usize {
        self.decode.input_dim() - 3
    }

    pub fn expression_dim(&self) -> usize {
        (self.deform.input_dim() - 3) / 2
    }
}

/// Fixed local descriptor per pixel: RGB, central-difference luminance
/// gradients and normalized pixel-center coordinates.
pub fn identity_features(color: &GeomImage) -> Result<GeomImage> {
    if color.channels() != 3 {
        return Err(Error::invalid("identity features need a 3-channel color image"));
    }
    let (w, h) = (color.width(), color.height());
    let lum = |x: usize, y: usize| {
        let p = color.pixel(x, y);
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    };
    let mut f = GeomImage::new(w, h, FEATURE_DIM, ImageKind::Feature);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = if x1 > x0 { (lum(x1, y) - lum(x0, y)) / (x1 - x0) as f64 } else { 0.0 };
            let gy = if y1 > y0 { (lum(x, y1) - lum(x, y0)) / (y1 - y0) as f64 } else { 0.0 };
            let p = color.pixel(x, y);
            let vals = [
                p[0],
                p[1],
                p[2],
                gx,
                gy,
                (x as f64 + 0.5) / w as f64,
                (y as f64 + 0.5) / h as f64,
            ];
            for (c, v) in vals.iter().enumerate() {
                f.set(x, y, c, *v);
            }
            // last channel: local luminance
            f.set(x, y, 7, lum(x, y));
        }
    }
    Ok(f)
}

fn check_grid(cloud: &GridPointCloud, features: &GeomImage, feature_dim: usize) -> Result<()> {
    if cloud.width() != features.width() || cloud.height() != features.height() {
        return Err(Error::invalid(format!(
            "feature map {}x{} does not match point grid {}x{}",
            features.width(),
            features.height(),
            cloud.width(),
            cloud.height()
        )));
    }
    if features.channels() != feature_dim {
        return Err(Error::invalid(format!(
            "feature map has {} channels, network expects {feature_dim}",
            features.channels()
        )));
    }
    Ok(())
}

pub fn cell_feature(features: &GeomImage, cell: usize) -> &[f64] {
    let c = features.channels();
    &features.data()[cell * c..(cell + 1) * c]
}

/// `[position; feature]` network input for one cell.
pub fn point_input(p: &Vec3, features: &GeomImage, cell: usize) -> Vec<f64> {
    let mut x = vec![p.x, p.y, p.z];
    x.extend_from_slice(cell_feature(features, cell));
    x
}

/// Adds the network's per-cell offset to every valid cell.
pub fn refine_geometry(coarse: &GridPointCloud, features: &GeomImage, net: &Mlp) -> Result<GridPointCloud> {
    if net.input_dim() != 3 + features.channels() || net.output_dim() != 3 {
        return Err(Error::invalid("refine network dimensions do not match the feature map"));
    }
    check_grid(coarse, features, net.input_dim() - 3)?;
    let mut out = coarse.clone();
    for (cell, p) in coarse.iter_valid() {
        let d = net.forward(&point_input(&p, features, cell));
        out.set(cell, p + Vec3::new(d[0], d[1], d[2]));
    }
    Ok(out)
}

/// Expression-driven residual deformation of every valid cell.
pub fn deform(
    cloud: &GridPointCloud,
    driving: &ExpressionCoeffs,
    source: &ExpressionCoeffs,
    net: &Mlp,
) -> Result<GridPointCloud> {
    if net.output_dim() != 3 || net.input_dim() < 3 || (net.input_dim() - 3) % 2 != 0 {
        return Err(Error::invalid("deformation network must map 3 + 2D inputs to 3 outputs"));
    }
    let dim = (net.input_dim() - 3) / 2;
    driving.validate(dim)?;
    source.validate(dim)?;
    let mut out = cloud.clone();
    let mut x = vec![0.0; net.input_dim()];
    x[3..3 + dim].copy_from_slice(&driving.0);
    x[3 + dim..].copy_from_slice(&source.0);
    for (cell, p) in cloud.iter_valid() {
        x[..3].copy_from_slice(&[p.x, p.y, p.z]);
        let d = net.forward(&x);
        out.set(cell, p + Vec3::new(d[0], d[1], d[2]));
    }
    Ok(out)
}

/// Interprets one decoder output vector; positions come from the point cloud.
pub fn parse_decoder_output(position: Vec3, out: &[f64]) -> Gaussian {
    let q = Quaternion::new(
        out[OUT_ROTATION] + 1.0,
        out[OUT_ROTATION + 1],
        out[OUT_ROTATION + 2],
        out[OUT_ROTATION + 3],
    );
    let rotation = q.normalized().unwrap_or(Quaternion::IDENTITY);
    let mut color = [0.0; COLOR_DIM];
    color.copy_from_slice(&out[OUT_COLOR..OUT_COLOR + COLOR_DIM]);
    Gaussian {
        position,
        rotation,
        log_scale: [out[OUT_LOG_SCALE], out[OUT_LOG_SCALE + 1], out[OUT_LOG_SCALE + 2]],
        opacity_logit: out[OUT_OPACITY],
        color,
    }
}

/// Gaussians for the visible cells: positions verbatim, remaining parameters
/// from the decoder.
pub fn decode_visible(driven: &GridPointCloud, features: &GeomImage, net: &Mlp) -> Result<GaussianCloud> {
    if net.output_dim() != DECODE_OUT || net.input_dim() != 3 + features.channels() {
        return Err(Error::invalid("decoder dimensions do not match the feature map"));
    }
    check_grid(driven, features, net.input_dim() - 3)?;
    let mut g = GaussianCloud::with_capacity(driven.valid_count());
    for (cell, p) in driven.iter_valid() {
        let out = net.forward(&point_input(&p, features, cell));
        g.push(parse_decoder_output(p, &out), Provenance::Visible, Some(cell));
    }
    Ok(g)
}

/// Network input of a symmetric offset decoder: `[position; feature; anchor]`.
pub fn sym_input(p: &Vec3, feature: &[f64], anchor: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(3 + feature.len() + anchor.len());
    x.extend_from_slice(&[p.x, p.y, p.z]);
    x.extend_from_slice(feature);
    x.extend_from_slice(anchor);
    x
}

/// Result of symmetric decoding.
#[derive(Debug, Clone)]
pub struct SymDecode {
    pub gaussians: GaussianCloud,
    /// Index into the visible cloud of each symmetric Gaussian's anchor.
    pub anchors: Vec<usize>,
    /// Mirrored cells whose source cell had no visible Gaussian.
    pub skipped: usize,
}

/// Gaussians for the mirrored cells as offsets from their mirror-source
/// visible Gaussians (the cell with the same grid index).
pub fn decode_symmetric(
    visible: &GaussianCloud,
    features: &GeomImage,
    mirrored: &GridPointCloud,
    nets: &SymDecoders,
) -> Result<SymDecode> {
    if visible.is_empty() {
        return Err(Error::invalid("symmetric decoding needs visible Gaussians"));
    }
    let c = features.channels();
    let dims = [
        (&nets.scale, 3),
        (&nets.rotation, 4),
        (&nets.color, COLOR_DIM),
        (&nets.opacity, 1),
    ];
    for (net, k) in dims {
        if net.input_dim() != 3 + c + k || net.output_dim() != k {
            return Err(Error::invalid("symmetric decoder dimensions do not match"));
        }
    }
    check_grid(mirrored, features, c)?;
    let mut by_cell = vec![usize::MAX; mirrored.len()];
    for (i, cell) in visible.grid_index.iter().enumerate() {
        if let Some(cell) = cell {
            if *cell < by_cell.len() && visible.provenance[i] == Provenance::Visible {
                by_cell[*cell] = i;
            }
        }
    }
    let mut out = GaussianCloud::with_capacity(mirrored.valid_count());
    let mut anchors = Vec::new();
    let mut skipped = 0;
    for (cell, p) in mirrored.iter_valid() {
        let src = by_cell[cell];
        if src == usize::MAX {
            skipped += 1;
            continue;
        }
        let anchor = visible.get(src);
        let feat = cell_feature(features, cell);
        let ds = nets.scale.forward(&sym_input(&p, feat, &anchor.log_scale));
        let rot = anchor.rotation.to_array();
        let dr = nets.rotation.forward(&sym_input(&p, feat, &rot));
        let dc = nets.color.forward(&sym_input(&p, feat, &anchor.color));
        let dop = nets.opacity.forward(&sym_input(&p, feat, &[anchor.opacity_logit]));

        let mut color: ColorCoeffs = anchor.color;
        color.iter_mut().zip(&dc).for_each(|(a, d)| *a += d);
        let r = Quaternion::new(rot[0] + dr[0], rot[1] + dr[1], rot[2] + dr[2], rot[3] + dr[3]);
        let rotation = if r.norm() > 1e-12 { r } else { anchor.rotation };
        let g = Gaussian {
            position: p,
            rotation,
            log_scale: [
                anchor.log_scale[0] + ds[0],
                anchor.log_scale[1] + ds[1],
                anchor.log_scale[2] + ds[2],
            ],
            opacity_logit: anchor.opacity_logit + dop[0],
            color,
        };
        out.push(g, Provenance::Symmetric, Some(cell));
        anchors.push(src);
    }
    if skipped > 0 {
        log::warn!("symmetric decode skipped {skipped} mirrored cells without a visible source");
    }
    Ok(SymDecode {
        gaussians: out,
        anchors,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell(p: Vec3) -> GridPointCloud {
        GridPointCloud::new(1, 1, vec![p], vec![true]).unwrap()
    }

    fn feature_1x1(vals: [f64; FEATURE_DIM]) -> GeomImage {
        GeomImage::from_data(1, 1, FEATURE_DIM, ImageKind::Feature, vals.to_vec()).unwrap()
    }

    #[test]
    fn parameter_count_law() {
        let net = Mlp::new(&[5, 7, 3], 1);
        assert_eq!(net.param_count(), 6 * 7 + 8 * 3);
        assert_eq!(Mlp::param_count_for(&[3, 2]), 8);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Mlp::new(&[4, 9, 2], 17);
        let b = Mlp::new(&[4, 9, 2], 17);
        assert_eq!(a, b);
        assert_ne!(a, Mlp::new(&[4, 9, 2], 18));
        assert!(a.params()[..(4 + 1) * 9].iter().all(|p| p.abs() <= 0.5));
        assert!(a.params()[(4 + 1) * 9..].iter().all(|p| p.abs() <= 1.0 / 3.0));
        let x = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(a.forward(&x), b.forward(&x));
    }

    #[test]
    fn zero_output_net_is_zero() {
        let net = Mlp::zero_output(&[4, 6, 3], 3);
        assert_eq!(net.forward(&[1.0, 2.0, 3.0, 4.0]), vec![0.0; 3]);
        assert!(net.params().iter().any(|p| *p != 0.0));
    }

    #[test]
    fn linear_closed_form_gradient() {
        // y = w x + b, L = y^2 -> dL/dw = 2 (w x + b) x
        let net = Mlp::from_params(&[1, 1], vec![0.7, 0.0], 0).unwrap();
        let x = 1.3;
        let (l, g) = grad(&net, &[vec![x]], |out| (out[0][0].powi(2), vec![vec![2.0 * out[0][0]]]));
        assert!((l - (0.7f64 * x).powi(2)).abs() < 1e-15);
        assert!((g[0] - 2.0 * 0.7 * x * x).abs() < 1e-14);
        assert!((g[1] - 2.0 * 0.7 * x).abs() < 1e-14);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let net = Mlp::new(&[3, 4, 2], 5);
        let (_, g) = grad(&net, &[vec![0.1, 0.2, 0.3]], |_| (4.0, vec![vec![0.0, 0.0]]));
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = Mlp::new(&[4, 6, 5, 3], 99);
        let inputs: Vec<Vec<f64>> = (0..3).map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect()).collect();
        let target = [0.3, -0.1, 0.5];
        let loss_of = |outs: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
            let mut l = 0.0;
            let mut gs = Vec::new();
            for o in outs {
                let mut g = vec![0.0; 3];
                for k in 0..3 {
                    let d = o[k] - target[k];
                    l += d * d * (k as f64 + 1.0);
                    g[k] = 2.0 * d * (k as f64 + 1.0);
                }
                gs.push(g);
            }
            (l, gs)
        };
        let (_, analytic) = grad(&net, &inputs, loss_of);
        let h = 1e-5;
        for i in 0..net.param_count() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let eval = |n: &Mlp| loss_of(&inputs.iter().map(|x| n.forward(x)).collect::<Vec<_>>()).0;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(rel < 1e-5, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Mlp::new(&[3, 5, 2], 4);
        let x = vec![0.2, -0.4, 0.9];
        let acts = net.forward_cached(&x);
        let mut pg = vec![0.0; net.param_count()];
        let gx = net.backward(&acts, &[1.0, -2.0], &mut pg);
        let f = |x: &[f64]| {
            let y = net.forward(x);
            y[0] - 2.0 * y[1]
        };
        for i in 0..3 {
            let mut a = x.clone();
            a[i] += 1e-6;
            let mut b = x.clone();
            b[i] -= 1e-6;
            let fd = (f(&a) - f(&b)) / 2e-6;
            assert!((fd - gx[i]).abs() < 1e-8);
        }
    }

    /// Hand evaluation of a [11, 2, 3] net with patterned weights.
    fn hand_net(n_in: usize, n_out: usize) -> Mlp {
        let mut params = Vec::new();
        for o in 0..2 {
            for i in 0..n_in {
                params.push(0.05 * (i as f64 + 1.0) * if o == 0 { 1.0 } else { -0.5 });
            }
        }
        params.extend_from_slice(&[0.1, -0.2]);
        for o in 0..n_out {
            params.push(0.3 + 0.01 * o as f64);
            params.push(-0.7 + 0.02 * o as f64);
        }
        for o in 0..n_out {
            params.push(0.001 * o as f64);
        }
        Mlp::from_params(&[n_in, 2, n_out], params, 0).unwrap()
    }

    fn hand_eval(x: &[f64], n_out: usize) -> Vec<f64> {
        let h0 = (0.1 + x.iter().enumerate().map(|(i, v)| 0.05 * (i as f64 + 1.0) * v).sum::<f64>()).tanh();
        let h1 = (-0.2 + x.iter().enumerate().map(|(i, v)| -0.025 * (i as f64 + 1.0) * v).sum::<f64>()).tanh();
        (0..n_out)
            .map(|o| (0.3 + 0.01 * o as f64) * h0 + (-0.7 + 0.02 * o as f64) * h1 + 0.001 * o as f64)
            .collect()
    }

    #[test]
    fn refine_zero_net_is_identity() {
        let mut c = GridPointCloud::empty(2, 1);
        c.set(0, Vec3::new(0.1, 0.2, 0.3));
        let f = GeomImage::filled(2, 1, FEATURE_DIM, ImageKind::Feature, 0.5);
        let bundle = RegressorBundle::new(&RegressorConfig::default());
        let out = refine_geometry(&c, &f, &bundle.refine).unwrap();
        assert_eq!(out, c);
        assert!(!out.is_valid(1));
    }

    #[test]
    fn refine_single_point_hand_oracle() {
        let p = Vec3::new(0.3, -0.2, 1.5);
        let feat = [0.1, 0.2, 0.3, 0.0, -0.1, 0.5, 0.5, 0.25];
        let net = hand_net(3 + FEATURE_DIM, 3);
        let out = refine_geometry(&single_cell(p), &feature_1x1(feat), &net).unwrap();
        let mut x = vec![p.x, p.y, p.z];
        x.extend_from_slice(&feat);
        let d = hand_eval(&x, 3);
        let want = p + Vec3::new(d[0], d[1], d[2]);
        assert!((out.position(0) - want).norm() < 1e-15);
    }

    #[test]
    fn refine_dimension_mismatch() {
        let c = single_cell(Vec3::zeros());
        let f = GeomImage::filled(2, 1, FEATURE_DIM, ImageKind::Feature, 0.0);
        let net = Mlp::zeros(&[3 + FEATURE_DIM, 3]);
        assert!(refine_geometry(&c, &f, &net).is_err());
    }

    #[test]
    fn deform_zero_net_and_hand_oracle() {
        let mut c = GridPointCloud::empty(3, 1);
        c.set(2, Vec3::new(0.4, 0.5, 0.6));
        let bd = ExpressionCoeffs(vec![0.2, -0.1]);
        let bs = ExpressionCoeffs(vec![0.0, 0.3]);
        let zero = Mlp::zero_output(&[7, 4, 3], 1);
        assert_eq!(deform(&c, &bd, &bs, &zero).unwrap(), c);

        let net = hand_net(7, 3);
        let out = deform(&c, &bd, &bs, &net).unwrap();
        let d = hand_eval(&[0.4, 0.5, 0.6, 0.2, -0.1, 0.0, 0.3], 3);
        assert!((out.position(2) - Vec3::new(0.4 + d[0], 0.5 + d[1], 0.6 + d[2])).norm() < 1e-15);
        assert_eq!(out.valid(), c.valid());
        assert!(deform(&c, &ExpressionCoeffs(vec![0.0; 3]), &bs, &net).is_err());
    }

    #[test]
    fn decode_positions_verbatim_and_zero_net_identity_rotation() {
        let p = Vec3::new(0.123_456_789, -1.0 / 3.0, 2.0f64.sqrt());
        let bundle = RegressorBundle::new(&RegressorConfig::default());
        let g = decode_visible(&single_cell(p), &feature_1x1([0.3; FEATURE_DIM]), &bundle.decode).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.positions[0], p);
        assert_eq!(g.rotations[0], Quaternion::IDENTITY);
        assert_eq!(g.log_scales[0], [0.0; 3]);
        assert_eq!(g.provenance[0], Provenance::Visible);
        assert_eq!(g.grid_index[0], Some(0));
    }

    #[test]
    fn decode_hand_oracle() {
        let p = Vec3::new(0.2, 0.1, 2.0);
        let feat = [0.5, 0.4, 0.3, 0.01, 0.02, 0.5, 0.5, 0.4];
        let net = hand_net(3 + FEATURE_DIM, DECODE_OUT);
        let g = decode_visible(&single_cell(p), &feature_1x1(feat), &net).unwrap();
        let mut x = vec![p.x, p.y, p.z];
        x.extend_from_slice(&feat);
        let o = hand_eval(&x, DECODE_OUT);
        let q = [o[3] + 1.0, o[4], o[5], o[6]];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = g.get(0);
        assert_eq!(got.log_scale, [o[0], o[1], o[2]]);
        let r = got.rotation.to_array();
        for k in 0..4 {
            assert!((r[k] - q[k] / n).abs() < 1e-15);
        }
        assert_eq!(got.opacity_logit, o[7]);
        assert_eq!(&got.color[..], &o[8..20]);
    }

    fn two_cell_setup() -> (GridPointCloud, GeomImage) {
        let mut c = GridPointCloud::empty(2, 1);
        c.set(0, Vec3::new(0.3, 0.0, 1.0));
        c.set(1, Vec3::new(0.5, 0.1, 1.1));
        let mut f = GeomImage::new(2, 1, FEATURE_DIM, ImageKind::Feature);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.13).cos();
        }
        (c, f)
    }

    #[test]
    fn zero_offsets_reproduce_anchor_parameters() {
        let (c, f) = two_cell_setup();
        let cfg = RegressorConfig::default();
        let mut bundle = RegressorBundle::new(&cfg);
        bundle.decode = Mlp::new(bundle.decode.widths(), 12);
        let visible = decode_visible(&c, &f, &bundle.decode).unwrap();
        let mut mirrored = crate::symmetry::mirror_x(&c);
        mirrored.invalidate(0);
        let sym = decode_symmetric(&visible, &f, &mirrored, &bundle.sym).unwrap();
        assert_eq!(sym.gaussians.len(), 1);
        assert_eq!(sym.skipped, 0);
        let (a, s) = (visible.get(1), sym.gaussians.get(0));
        assert_eq!(s.position, mirrored.position(1));
        assert_eq!(s.rotation, a.rotation);
        assert_eq!(s.log_scale, a.log_scale);
        assert_eq!(s.color, a.color);
        assert_eq!(s.opacity_logit, a.opacity_logit);
        assert_eq!(sym.gaussians.provenance[0], Provenance::Symmetric);
    }

    #[test]
    fn symmetric_hand_oracle() {
        let (c, f) = two_cell_setup();
        let mut bundle = RegressorBundle::new(&RegressorConfig::default());
        bundle.decode = Mlp::new(bundle.decode.widths(), 3);
        let visible = decode_visible(&c, &f, &bundle.decode).unwrap();
        let sym_nets = SymDecoders {
            scale: hand_net(3 + FEATURE_DIM + 3, 3),
            rotation: hand_net(3 + FEATURE_DIM + 4, 4),
            color: hand_net(3 + FEATURE_DIM + COLOR_DIM, COLOR_DIM),
            opacity: hand_net(3 + FEATURE_DIM + 1, 1),
        };
        let mut mirrored = crate::symmetry::mirror_x(&c);
        mirrored.invalidate(1);
        let sym = decode_symmetric(&visible, &f, &mirrored, &sym_nets).unwrap();
        let a = visible.get(0);
        let p = mirrored.position(0);
        let feat = &f.data()[..FEATURE_DIM];
        let input = |anchor: &[f64]| {
            let mut x = vec![p.x, p.y, p.z];
            x.extend_from_slice(feat);
            x.extend_from_slice(anchor);
            x
        };
        let s = sym.gaussians.get(0);
        let ds = hand_eval(&input(&a.log_scale), 3);
        for k in 0..3 {
            assert!((s.log_scale[k] - (a.log_scale[k] + ds[k])).abs() < 1e-15);
        }
        let dr = hand_eval(&input(&a.rotation.to_array()), 4);
        let r = s.rotation.to_array();
        for k in 0..4 {
            assert!((r[k] - (a.rotation.to_array()[k] + dr[k])).abs() < 1e-15);
        }
        let dc = hand_eval(&input(&a.color), COLOR_DIM);
        for k in 0..COLOR_DIM {
            assert!((s.color[k] - (a.color[k] + dc[k])).abs() < 1e-15);
        }
        let dop = hand_eval(&input(&[a.opacity_logit]), 1);
        assert!((s.opacity_logit - (a.opacity_logit + dop[0])).abs() < 1e-15);
    }

    #[test]
    fn symmetric_skips_missing_sources() {
        let (c, f) = two_cell_setup();
        let bundle = RegressorBundle::new(&RegressorConfig::default());
        let mut only_first = c.clone();
        only_first.invalidate(1);
        let visible = decode_visible(&only_first, &f, &bundle.decode).unwrap();
        let mirrored = crate::symmetry::mirror_x(&c);
        let sym = decode_symmetric(&visible, &f, &mirrored, &bundle.sym).unwrap();
        assert_eq!(sym.skipped, 1);
        assert_eq!(sym.gaussians.len(), 1);
    }

    #[test]
    fn identity_feature_layout() {
        let mut color = GeomImage::new(4, 2, 3, ImageKind::Color);
        for x in 0..4 {
            for y in 0..2 {
                for c in 0..3 {
                    color.set(x, y, c, 0.25 * x as f64);
                }
            }
        }
        let f = identity_features(&color).unwrap();
        assert_eq!(f.channels(), FEATURE_DIM);
        assert_eq!(&f.pixel(1, 0)[..3], &[0.25, 0.25, 0.25]);
        assert!((f.get(1, 0, 3) - 0.25).abs() < 1e-12);
        assert_eq!(f.get(1, 0, 4), 0.0);
        assert_eq!(f.get(1, 1, 5), 1.5 / 4.0);
        assert_eq!(f.get(1, 1, 6), 0.75);
    }
}
