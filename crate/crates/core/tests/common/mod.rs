#![allow(dead_code)]

pub mod checks;

use autosplat_core::gaussian::{logit, normalized, GaussianCloud, GaussianPrimitive};
use autosplat_core::raster::{accumulate_cloud_grads, render, render_backward, RenderScene};
use autosplat_core::{ClassTag, CloudGrads};
use autosplat_scene::{CameraView, Intrinsics};
use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn axis_camera(w: u32, h: u32, f: f64) -> CameraView {
    CameraView::new(
        Intrinsics { fx: f, fy: f, cx: w as f64 / 2.0, cy: h as f64 / 2.0 },
        Matrix4::identity(),
        w,
        h,
        0,
    )
    .unwrap()
}

pub fn gaussian(mu: [f64; 3], scale: f64, opacity: f64, degree: usize) -> GaussianPrimitive {
    GaussianPrimitive {
        mu,
        rot: [1.0, 0.0, 0.0, 0.0],
        log_scale: [scale.ln(); 3],
        opacity_logit: logit(opacity),
        sh: vec![0.0; 3 * (degree + 1) * (degree + 1)],
        class: ClassTag::Other,
    }
}

/// Random Gaussians in front of an axis-aligned camera at depth 3..6.
pub fn random_cloud(n: usize, degree: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(degree);
    let width = 3 * (degree + 1) * (degree + 1);
    for _ in 0..n {
        let z = rng.random_range(3.0..6.0);
        let q = normalized([
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ]);
        let mut sh: Vec<f64> = (0..width).map(|_| rng.random_range(-0.3..0.3)).collect();
        for c in 0..3 {
            sh[c] = rng.random_range(-1.0..1.5);
        }
        cloud.push(GaussianPrimitive {
            mu: [rng.random_range(-1.2..1.2) * z / 4.0, rng.random_range(-1.2..1.2) * z / 4.0, z],
            rot: q,
            log_scale: [
                rng.random_range(0.08f64..0.45).ln(),
                rng.random_range(0.08f64..0.45).ln(),
                rng.random_range(0.08f64..0.45).ln(),
            ],
            opacity_logit: logit(rng.random_range(0.2..0.8)),
            sh,
            class: ClassTag::Other,
        });
    }
    cloud
}

/// Loss = Σ weights · image; returns value and gradients on raw parameters.
pub fn weighted_loss(cloud: &GaussianCloud, cam: &CameraView, weights: &[f64]) -> (f64, CloudGrads) {
    let scene = RenderScene::from_cloud(cloud);
    let out = render(&scene, cam);
    let value = out.image.data.iter().zip(weights).map(|(a, b)| a * b).sum();
    let g = render_backward(&scene, cam, &out, weights);
    let mut cg = CloudGrads::zeros(cloud);
    accumulate_cloud_grads(cloud, &g, 0..cloud.len(), None, &mut cg);
    (value, cg)
}

pub fn loss_only(cloud: &GaussianCloud, cam: &CameraView, weights: &[f64]) -> f64 {
    let out = render(&RenderScene::from_cloud(cloud), cam);
    out.image.data.iter().zip(weights).map(|(a, b)| a * b).sum()
}

/// One coordinate comparison.
#[derive(Debug, Clone, Copy)]
pub struct Check {
    pub analytic: f64,
    pub numeric: f64,
}

impl Check {
    pub fn rel_err(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-300)
    }
}

/// Fraction of coordinates with |g| > 1e-6 whose relative error is within `tol`.
pub fn pass_rate(checks: &[Check], tol: f64) -> (f64, usize) {
    let relevant: Vec<&Check> = checks.iter().filter(|c| c.analytic.abs() > 1e-6).collect();
    if relevant.is_empty() {
        return (1.0, 0);
    }
    let ok = relevant.iter().filter(|c| c.rel_err() <= tol).count();
    (ok as f64 / relevant.len() as f64, relevant.len())
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Finite-difference sweep over every raw parameter of `cloud`.
pub fn raster_gradient_sweep(cloud: &GaussianCloud, cam: &CameraView, weights: &[f64], h: f64) -> Vec<Check> {
    let (_, g) = weighted_loss(cloud, cam, weights);
    let mut checks = Vec::new();
    let sw = cloud.sh_width();
    for i in 0..cloud.len() {
        for k in 0..3 {
            let num = central_difference(|v| { let mut c = cloud.clone(); c.mu[i][k] = v; loss_only(&c, cam, weights) }, cloud.mu[i][k], h);
            checks.push(Check { analytic: g.mu[i][k], numeric: num });
            let num = central_difference(|v| { let mut c = cloud.clone(); c.log_scale[i][k] = v; loss_only(&c, cam, weights) }, cloud.log_scale[i][k], h);
            checks.push(Check { analytic: g.log_scale[i][k], numeric: num });
        }
        for k in 0..4 {
            let num = central_difference(|v| { let mut c = cloud.clone(); c.rot[i][k] = v; loss_only(&c, cam, weights) }, cloud.rot[i][k], h);
            checks.push(Check { analytic: g.rot[i][k], numeric: num });
        }
        let num = central_difference(|v| { let mut c = cloud.clone(); c.opacity_logit[i] = v; loss_only(&c, cam, weights) }, cloud.opacity_logit[i], h);
        checks.push(Check { analytic: g.opacity_logit[i], numeric: num });
        for k in 0..sw {
            let idx = i * sw + k;
            let num = central_difference(|v| { let mut c = cloud.clone(); c.sh[idx] = v; loss_only(&c, cam, weights) }, cloud.sh[idx], h);
            checks.push(Check { analytic: g.sh[idx], numeric: num });
        }
    }
    checks
}

pub fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}
