//! Training losses with analytic gradients, and evaluation metrics.

use autosplat_scene::ColorImage;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::gaussian::{
    normalized, quat_to_matrix, roll_pitch_backward, roll_pitch_of_matrix, rotation_backward,
    CloudGrads, GaussianCloud,
};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of D-SSIM against L1.
    pub lambda: f64,
    /// Flatness constraint weight.
    pub beta: f64,
    /// Residual-SH sparsity weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.2,
            beta: 1000.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(CoreError::Config(format!(
                "loss weights need lambda in [0,1] and beta, gamma >= 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient w.r.t. the rendered image (H×W×3).
#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_pair(gt: &ColorImage, rendered: &ColorImage, mask: &[bool], region: &str) -> Result<usize> {
    if !gt.same_shape(rendered) || mask.len() != gt.pixel_count() {
        return Err(CoreError::InvalidSize(format!(
            "image pair {}x{} / {}x{} with mask of {} pixels",
            gt.width,
            gt.height,
            rendered.width,
            rendered.height,
            mask.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(CoreError::EmptyRegion { region: region.to_string() });
    }
    Ok(n)
}

/// Mean absolute error over masked pixels and channels.
pub fn l1_loss(gt: &ColorImage, rendered: &ColorImage, mask: &[bool], region: &str) -> Result<ImageLoss> {
    let n = check_pair(gt, rendered, mask, region)?;
    let inv = 1.0 / (3 * n) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; gt.data.len()];
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for ch in 0..3 {
            let d = rendered.data[3 * p + ch] - gt.data[3 * p + ch];
            value += d.abs();
            grad[3 * p + ch] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok(ImageLoss { value: value * inv, grad })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "same"-size filtering with zero padding. Self-adjoint because the kernel is symmetric.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Masked SSIM and optionally its gradient w.r.t. `rendered`.
///
/// Both images are zeroed outside the mask before filtering and the SSIM map
/// is averaged over window centers inside the mask.
fn ssim_impl(gt: &ColorImage, rendered: &ColorImage, mask: &[bool], with_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (gt.width, gt.height);
    let k = gaussian_kernel();
    let n = mask.iter().filter(|&&m| m).count();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; w * h * 3]);
    let scale = 1.0 / (3 * n) as f64;
    for ch in 0..3 {
        let x: Vec<f64> = (0..w * h).map(|p| if mask[p] { rendered.data[3 * p + ch] } else { 0.0 }).collect();
        let y: Vec<f64> = (0..w * h).map(|p| if mask[p] { gt.data[3 * p + ch] } else { 0.0 }).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, my) = (blur(&x, w, h, &k), blur(&y, w, h, &k));
        let (mxx, myy, mxy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));
        let mut p_mu = vec![0.0; w * h];
        let mut p_xx = vec![0.0; w * h];
        let mut p_xy = vec![0.0; w * h];
        for p in 0..w * h {
            if !mask[p] {
                continue;
            }
            let a1 = 2.0 * mx[p] * my[p] + c1;
            let a2 = 2.0 * (mxy[p] - mx[p] * my[p]) + c2;
            let b1 = mx[p] * mx[p] + my[p] * my[p] + c1;
            let b2 = (mxx[p] - mx[p] * mx[p]) + (myy[p] - my[p] * my[p]) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if with_grad {
                // weights of dSSIM_mean/dS(p) = scale
                p_mu[p] = scale
                    * s
                    * (2.0 * my[p] / a1 - 2.0 * mx[p] / b1 - 2.0 * my[p] / a2 + 2.0 * mx[p] / b2);
                p_xx[p] = scale * (-s / b2);
                p_xy[p] = scale * s * 2.0 / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let (bmu, bxx, bxy) = (blur(&p_mu, w, h, &k), blur(&p_xx, w, h, &k), blur(&p_xy, w, h, &k));
            for p in 0..w * h {
                if mask[p] {
                    g[3 * p + ch] = bmu[p] + 2.0 * x[p] * bxx[p] + y[p] * bxy[p];
                }
            }
        }
    }
    (total * scale, grad)
}

fn check_window(img: &ColorImage) -> Result<()> {
    if img.width < SSIM_WINDOW || img.height < SSIM_WINDOW {
        return Err(CoreError::InvalidSize(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, image is {}x{}",
            img.width, img.height
        )));
    }
    Ok(())
}

/// (1 − SSIM) / 2 over the masked region.
pub fn dssim_loss(gt: &ColorImage, rendered: &ColorImage, mask: &[bool], region: &str) -> Result<ImageLoss> {
    check_pair(gt, rendered, mask, region)?;
    check_window(gt)?;
    let (s, g) = ssim_impl(gt, rendered, mask, true);
    let grad = g.expect("gradient requested").into_iter().map(|v| -0.5 * v).collect();
    Ok(ImageLoss { value: 0.5 * (1.0 - s), grad })
}

/// (1−λ)·L1 + λ·D-SSIM with the combined gradient.
#[derive(Debug, Clone)]
pub struct PhotometricLoss {
    pub l1: f64,
    pub dssim: f64,
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn photometric_loss(
    gt: &ColorImage,
    rendered: &ColorImage,
    mask: &[bool],
    lambda: f64,
    region: &str,
) -> Result<PhotometricLoss> {
    let l1 = l1_loss(gt, rendered, mask, region)?;
    let ds = dssim_loss(gt, rendered, mask, region)?;
    let grad = l1
        .grad
        .iter()
        .zip(&ds.grad)
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    Ok(PhotometricLoss {
        l1: l1.value,
        dssim: ds.value,
        value: (1.0 - lambda) * l1.value + lambda * ds.value,
        grad,
    })
}

/// Flatness penalty (1/N)·Σ(|φ| + |θ| + s_z) over the road and sky Gaussians among `idx`.
///
/// Other classes contribute nothing and do not count towards N. When `grads` is
/// given, `weight` times the penalty's gradient is added to it.
pub fn flatness_penalty(
    cloud: &GaussianCloud,
    idx: &[usize],
    weight: f64,
    mut grads: Option<&mut CloudGrads>,
) -> f64 {
    let flat: Vec<usize> = idx.iter().copied().filter(|&i| cloud.class[i].is_flat()).collect();
    if flat.is_empty() {
        log::debug!("flatness penalty over an empty road/sky set");
        return 0.0;
    }
    let inv = 1.0 / flat.len() as f64;
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let mut total = 0.0;
    for &i in &flat {
        let r = quat_to_matrix(&normalized(cloud.rot[i]));
        let (phi, theta) = roll_pitch_of_matrix(&r);
        let sz = cloud.log_scale[i][2].exp();
        total += phi.abs() + theta.abs() + sz;
        if let Some(g) = grads.as_deref_mut() {
            let gr = roll_pitch_backward(&r, weight * inv * sign(phi), weight * inv * sign(theta));
            let dq = rotation_backward(&cloud.rot[i], &gr);
            for k in 0..4 {
                g.rot[i][k] += dq[k];
            }
            g.log_scale[i][2] += weight * inv * sz;
        }
    }
    total * inv
}

/// Background objective (1−λ)·L1 + λ·D-SSIM + β·C.
pub fn background_loss(photometric: &PhotometricLoss, constraint: f64, w: &LossWeights) -> f64 {
    photometric.value + w.beta * constraint
}

/// Foreground objective: direct and reflected photometric terms plus γ·mean|ΔSH|.
pub fn foreground_loss(
    direct: &PhotometricLoss,
    reflected: Option<&PhotometricLoss>,
    mean_abs_residual: f64,
    w: &LossWeights,
) -> f64 {
    direct.value + reflected.map_or(0.0, |r| r.value) + w.gamma * mean_abs_residual
}

pub fn total_loss(background: f64, foreground: f64) -> f64 {
    background + foreground
}

/// Peak signal-to-noise ratio over masked pixels, capped at 100 dB.
pub fn psnr(gt: &ColorImage, rendered: &ColorImage, mask: Option<&[bool]>) -> Result<f64> {
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = vec![true; gt.pixel_count()];
            &full
        }
    };
    let n = check_pair(gt, rendered, mask, "psnr")?;
    let mut se = 0.0;
    for (p, &m) in mask.iter().enumerate() {
        if m {
            for ch in 0..3 {
                let d = rendered.data[3 * p + ch] - gt.data[3 * p + ch];
                se += d * d;
            }
        }
    }
    let mse = se / (3 * n) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over masked window centers (11×11 Gaussian window, σ = 1.5).
pub fn ssim(gt: &ColorImage, rendered: &ColorImage, mask: Option<&[bool]>) -> Result<f64> {
    let full;
    let mask = match mask {
        Some(m) => m,
        None => {
            full = vec![true; gt.pixel_count()];
            &full
        }
    };
    check_pair(gt, rendered, mask, "ssim")?;
    check_window(gt)?;
    Ok(ssim_impl(gt, rendered, mask, false).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn noise_image(w: usize, h: usize, seed: u64) -> ColorImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut img = ColorImage::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn l1_examples() {
        let gt = noise_image(4, 4, 1);
        let full = vec![true; 16];
        assert_eq!(l1_loss(&gt, &gt, &full, "x").unwrap().value, 0.0);
        let mut shifted = gt.clone();
        shifted.data.iter_mut().for_each(|v| *v += 0.1);
        assert_relative_eq!(l1_loss(&gt, &shifted, &full, "x").unwrap().value, 0.1, epsilon = 1e-12);
        let half: Vec<bool> = (0..16).map(|p| p < 8).collect();
        let mut partial = gt.clone();
        for p in 0..8 {
            for c in 0..3 {
                partial.data[3 * p + c] += 0.2;
            }
        }
        for p in 8..16 {
            partial.data[3 * p] += 5.0;
        }
        let l = l1_loss(&gt, &partial, &half, "x").unwrap();
        assert_relative_eq!(l.value, 0.2, epsilon = 1e-12);
        assert!(l.grad[3 * 8..].iter().all(|&g| g == 0.0));
        assert!(matches!(
            l1_loss(&gt, &gt, &[false; 16], "road"),
            Err(CoreError::EmptyRegion { region }) if region == "road"
        ));
    }

    #[test]
    fn dssim_examples() {
        let a = noise_image(16, 16, 3);
        let full = vec![true; 256];
        assert!(dssim_loss(&a, &a, &full, "x").unwrap().value.abs() < 1e-12);
        let mut board = ColorImage::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let v = if (x / 4 + y / 4) % 2 == 0 { 1.0 } else { 0.0 };
                board.set(x, y, [v; 3]);
            }
        }
        let mut inv = board.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let d = dssim_loss(&board, &inv, &vec![true; 1024], "x").unwrap().value;
        assert!(d > 0.5 && d <= 1.0, "{d}");
        let small = noise_image(8, 8, 0);
        assert!(matches!(dssim_loss(&small, &small, &[true; 64], "x"), Err(CoreError::InvalidSize(_))));
    }

    #[test]
    fn psnr_examples() {
        let gt = ColorImage::filled(8, 8, [0.5; 3]);
        let r = ColorImage::filled(8, 8, [0.6; 3]);
        assert_relative_eq!(psnr(&gt, &r, None).unwrap(), 20.0, epsilon = 1e-9);
        assert_eq!(psnr(&gt, &gt, None).unwrap(), PSNR_CAP);
        let big = ColorImage::filled(12, 12, [0.3; 3]);
        assert_relative_eq!(ssim(&big, &big, None).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda: 1.5, ..Default::default() }.validate().is_err());
    }
}
