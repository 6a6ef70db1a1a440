//! Compares the analytic color and opacity gradients of the renderer with
//! central finite differences on a small random scene.
//!
//! Usage: `cargo run --release --example gradient_check [n_gaussians] [seed]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splathead::camera::{Camera, Quaternion};
use splathead::gaussians::{Gaussian, GaussianCloud, Provenance};
use splathead::geom::{GeomImage, ImageKind, Vec3};
use splathead::renderer::{render, render_grad_color_opacity, RenderConfig};

fn objective(cloud: &GaussianCloud, cam: &Camera, cfg: &RenderConfig, w: &GeomImage) -> f64 {
    let out = render(cloud, cam, cfg).unwrap();
    out.color.data().iter().zip(w.data()).map(|(c, w)| c * w).sum()
}

fn main() -> splathead::error::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::frontal(24, 24, 28.0, 3.0)?;
    let cfg = RenderConfig { alpha_floor: 1e-12, ..RenderConfig::default() };

    let mut cloud = GaussianCloud::with_capacity(n);
    for _ in 0..n {
        let g = Gaussian {
            position: Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3)),
            rotation: Quaternion::new(1.0, rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)).normalized()?,
            log_scale: [rng.gen_range(-2.5..-1.5), rng.gen_range(-2.5..-1.5), rng.gen_range(-2.5..-1.5)],
            opacity_logit: rng.gen_range(-1.0..2.0),
            color: std::array::from_fn(|_| rng.gen_range(-0.5..0.5)),
        };
        cloud.push(g, Provenance::Visible, None);
    }
    let weights = GeomImage::from_data(24, 24, 3, ImageKind::Feature, (0..24 * 24 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let grad = render_grad_color_opacity(&cloud, &cam, &cfg, &weights)?;

    let h = 1e-3;
    let fd = |mut perturb: Box<dyn FnMut(&mut Gaussian, f64)>| {
        let mut at = |d: f64| {
            let mut c = GaussianCloud::with_capacity(cloud.len());
            for i in 0..cloud.len() {
                let mut g = cloud.get(i);
                if i == 0 {
                    perturb(&mut g, d);
                }
                c.push(g, cloud.provenance[i], cloud.grid_index[i]);
            }
            objective(&c, &cam, &cfg, &weights)
        };
        (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
    };
    let numeric = fd(Box::new(|g, d| g.opacity_logit += d));
    println!("opacity[0]: analytic {:+.8} numeric {:+.8}", grad.opacity_logit[0], numeric);
    for k in [0, 4, 8] {
        let numeric = fd(Box::new(move |g, d| g.color[k] += d));
        println!("color[0][{k}]: analytic {:+.8} numeric {:+.8}", grad.color[0][k], numeric);
    }
    Ok(())
}
