//! Finite-difference sweeps and reflection oracles shared by the focused
//! tests and the acceptance run.

use autosplat_core::foreground::appearance::EMBED_DIM;
use autosplat_core::foreground::{reflect_gaussians, reflection_matrix, AppearanceModel, Reflection};
use autosplat_core::gaussian::{build_covariance, logit, normalized, GaussianPrimitive};
use autosplat_core::loss::{dssim_loss, flatness_penalty, l1_loss, ImageLoss};
use autosplat_core::raster::{render, RenderScene};
use autosplat_core::{sh, ClassTag, CloudGrads, GaussianCloud};
use autosplat_scene::ColorImage;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 {
            return v.normalize();
        }
    }
}

pub fn noise_image(w: usize, h: usize, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ColorImage::new(w, h);
    for v in img.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    img
}

/// 50 Gaussians, 32×32 view, uniform upstream weights.
pub fn raster_checks() -> Vec<Check> {
    let cloud = random_cloud(50, 2, 17);
    let cam = axis_camera(32, 32, 28.0);
    let w = vec![1.0 / (32.0 * 32.0 * 3.0); 32 * 32 * 3];
    raster_gradient_sweep(&cloud, &cam, &w, 1e-4)
}

/// Per-pixel sweep of an image loss on a 32×32 pair with a partial mask.
fn image_loss_checks(f: fn(&ColorImage, &ColorImage, &[bool], &str) -> autosplat_core::Result<ImageLoss>, h: f64) -> Vec<Check> {
    let gt = noise_image(32, 32, 1);
    let mut rendered = noise_image(32, 32, 2);
    // keep every residual away from the L1 kink
    for (r, g) in rendered.data.iter_mut().zip(&gt.data) {
        if (*r - g).abs() < 0.01 {
            *r = g + 0.05;
        }
    }
    let mask: Vec<bool> = (0..32 * 32).map(|p| (p % 32) < 24 || p / 32 < 8).collect();
    let loss = f(&gt, &rendered, &mask, "fixture").unwrap();
    (0..rendered.data.len())
        .map(|k| {
            let numeric = central_difference(
                |v| {
                    let mut r = rendered.clone();
                    r.data[k] = v;
                    f(&gt, &r, &mask, "fixture").unwrap().value
                },
                rendered.data[k],
                h,
            );
            Check { analytic: loss.grad[k], numeric }
        })
        .collect()
}

pub fn l1_checks() -> Vec<Check> {
    image_loss_checks(l1_loss, 1e-6)
}

pub fn dssim_checks() -> Vec<Check> {
    image_loss_checks(dssim_loss, 1e-6)
}

/// 64 Gaussians with random orientations; road and sky carry the penalty.
pub fn flatness_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cloud = GaussianCloud::new(0);
    for i in 0..64 {
        let class = [ClassTag::Road, ClassTag::Sky, ClassTag::Other][i % 3];
        cloud.push(GaussianPrimitive {
            mu: [i as f64, 0.0, 0.0],
            rot: normalized([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]),
            log_scale: [rng.random_range(-3.0..0.0), rng.random_range(-3.0..0.0), rng.random_range(-3.0..0.0)],
            opacity_logit: logit(0.5),
            sh: vec![0.5; 3],
            class,
        });
    }
    let idx: Vec<usize> = (0..cloud.len()).collect();
    let mut g = CloudGrads::zeros(&cloud);
    flatness_penalty(&cloud, &idx, 1.0, Some(&mut g));
    let h = 1e-6;
    let mut checks = Vec::new();
    for i in 0..cloud.len() {
        for k in 0..4 {
            let numeric = central_difference(|v| { let mut c = cloud.clone(); c.rot[i][k] = v; flatness_penalty(&c, &idx, 1.0, None) }, cloud.rot[i][k], h);
            checks.push(Check { analytic: g.rot[i][k], numeric });
        }
        for k in 0..3 {
            let numeric =
                central_difference(|v| { let mut c = cloud.clone(); c.log_scale[i][k] = v; flatness_penalty(&c, &idx, 1.0, None) }, cloud.log_scale[i][k], h);
            checks.push(Check { analytic: g.log_scale[i][k], numeric });
        }
    }
    checks
}

/// Appearance MLP on four Gaussians with a randomized output layer.
pub fn mlp_checks() -> Vec<Check> {
    let mut m = AppearanceModel::new(3, 27, 5, 9);
    // a zero output layer hides the hidden-layer gradients
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = m.weights.len();
    for w in &mut m.weights[n - 27 - 27 * 64..] {
        *w = rng.random_range(-0.3..0.3);
    }
    let cloud = random_cloud(4, 2, 17);
    let upstream: Vec<f64> = (0..cloud.sh.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let e = m.embedding(1).unwrap();
    let loss = |m: &AppearanceModel, e: &[f64; EMBED_DIM], c: &GaussianCloud| -> f64 {
        m.residuals(e, c).iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    let g = m.backward(&e, &cloud, &upstream);
    let h = 1e-6;
    let mut checks = Vec::new();
    for k in 0..m.weights.len() {
        let numeric = central_difference(|v| { let mut mm = m.clone(); mm.weights[k] = v; loss(&mm, &e, &cloud) }, m.weights[k], h);
        checks.push(Check { analytic: g.weights[k], numeric });
    }
    for k in 0..EMBED_DIM {
        let numeric = central_difference(|v| { let mut ee = e; ee[k] = v; loss(&m, &ee, &cloud) }, e[k], h);
        checks.push(Check { analytic: g.embedding[k], numeric });
    }
    for i in 0..cloud.len() {
        for k in 0..3 {
            let numeric = central_difference(|v| { let mut c = cloud.clone(); c.mu[i][k] = v; loss(&m, &e, &c) }, cloud.mu[i][k], h);
            checks.push(Check { analytic: g.mu[i][k], numeric });
        }
    }
    for k in 0..cloud.sh.len() {
        let numeric = central_difference(|v| { let mut c = cloud.clone(); c.sh[k] = v; loss(&m, &e, &c) }, cloud.sh[k], h);
        checks.push(Check { analytic: g.sh[k], numeric });
    }
    checks
}

/// Loss through the mirrored copy, pulled back onto the source parameters.
pub fn reflection_checks() -> Vec<Check> {
    let axis = Vector3::new(0.8, 0.3, -0.2);
    let refl = Reflection::new(&axis, 2).unwrap();
    let cloud = random_cloud(10, 2, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let weights: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    // the mirrored cloud must stay in view
    let m = reflection_matrix(&axis).unwrap();
    let cam = axis_camera(32, 32, 30.0).mirrored(&m, &Vector3::zeros());
    let (_, g) = weighted_loss(&refl.reflect_cloud(&cloud), &cam, &weights);
    let g = refl.pull_back(&cloud, &g);
    let f = |c: &GaussianCloud| loss_only(&refl.reflect_cloud(c), &cam, &weights);
    let h = 1e-5;
    let mut checks = Vec::new();
    let sw = cloud.sh_width();
    for i in 0..cloud.len() {
        for k in 0..3 {
            let numeric = central_difference(|v| { let mut c = cloud.clone(); c.mu[i][k] = v; f(&c) }, cloud.mu[i][k], h);
            checks.push(Check { analytic: g.mu[i][k], numeric });
            let numeric = central_difference(|v| { let mut c = cloud.clone(); c.log_scale[i][k] = v; f(&c) }, cloud.log_scale[i][k], h);
            checks.push(Check { analytic: g.log_scale[i][k], numeric });
        }
        for k in 0..4 {
            let numeric = central_difference(|v| { let mut c = cloud.clone(); c.rot[i][k] = v; f(&c) }, cloud.rot[i][k], h);
            checks.push(Check { analytic: g.rot[i][k], numeric });
        }
        let numeric = central_difference(|v| { let mut c = cloud.clone(); c.opacity_logit[i] = v; f(&c) }, cloud.opacity_logit[i], h);
        checks.push(Check { analytic: g.opacity_logit[i], numeric });
        for k in 0..sw {
            let idx = i * sw + k;
            let numeric = central_difference(|v| { let mut c = cloud.clone(); c.sh[idx] = v; f(&c) }, cloud.sh[idx], h);
            checks.push(Check { analytic: g.sh[idx], numeric });
        }
    }
    checks
}

/// Worst |M² − I|, |MMᵀ − I| and |det M + 1| over random axes.
pub fn reflection_matrix_error(axes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..axes {
        let a = random_unit(&mut rng) * rng.random_range(0.5..3.0);
        let m = reflection_matrix(&a).unwrap();
        worst = worst
            .max((m * m - Matrix3::identity()).abs().max())
            .max((m * m.transpose() - Matrix3::identity()).abs().max())
            .max((m.determinant() + 1.0).abs());
    }
    worst
}

/// Worst parameter difference after reflecting twice about the same axis.
pub fn double_reflection_error(cloud: &GaussianCloud, axis: &Vector3<f64>) -> f64 {
    let twice = reflect_gaussians(&reflect_gaussians(cloud, axis).unwrap(), axis).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..cloud.len() {
        for k in 0..3 {
            worst = worst.max((twice.mu[i][k] - cloud.mu[i][k]).abs()).max((twice.log_scale[i][k] - cloud.log_scale[i][k]).abs());
        }
        for k in 0..4 {
            worst = worst.max((twice.rot[i][k] - cloud.rot[i][k]).abs());
        }
        worst = worst.max((twice.opacity_logit[i] - cloud.opacity_logit[i]).abs());
    }
    twice.sh.iter().zip(&cloud.sh).fold(worst, |w, (x, y)| w.max((x - y).abs()))
}

/// Worst |Σ' − MΣM| between a cloud and its mirror image.
pub fn mirrored_covariance_error(cloud: &GaussianCloud, axis: &Vector3<f64>) -> f64 {
    let m = reflection_matrix(axis).unwrap();
    let once = reflect_gaussians(cloud, axis).unwrap();
    (0..cloud.len())
        .map(|i| {
            let sig = build_covariance(&cloud.rot[i], &cloud.scale(i)).unwrap();
            let sig_r = build_covariance(&once.rot[i], &once.scale(i)).unwrap();
            (sig_r - m * sig * m).abs().max()
        })
        .fold(0.0, f64::max)
}

/// Flipped render of a cloud against the render of its mirror image seen
/// from the mirrored camera; returns the worst channel difference.
pub fn mirror_render_error(cloud: &GaussianCloud, axis: &Vector3<f64>) -> f64 {
    let cam = axis_camera(48, 40, 50.0);
    let m = reflection_matrix(axis).unwrap();
    let reflected = reflect_gaussians(cloud, axis).unwrap();
    let a = render(&RenderScene::from_cloud(cloud), &cam).image.flipped_horizontal();
    let b = render(&RenderScene::from_cloud(&reflected), &cam.mirrored(&m, &Vector3::zeros())).image;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Reflected SH evaluated along mirrored directions against the source
/// colors over `dirs` random directions per axis.
pub fn sh_direction_error(dirs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let random_axis = random_unit(&mut rng);
    for axis in [Vector3::y(), Vector3::x(), random_axis] {
        let m = reflection_matrix(&axis).unwrap();
        let refl = Reflection::new(&axis, 2).unwrap();
        let coeffs: Vec<f64> = (0..27).map(|_| rng.random_range(-0.6..0.6)).collect();
        let mirrored = refl.reflect_sh(&coeffs);
        for _ in 0..dirs {
            let v = random_unit(&mut rng);
            let a = sh::raw_color(&coeffs, 2, &v);
            let b = sh::raw_color(&mirrored, 2, &(m * v));
            for c in 0..3 {
                worst = worst.max((a[c] - b[c]).abs());
            }
        }
    }
    worst
}
