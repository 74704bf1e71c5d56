//! Time-dependent residual SH from a temporal embedding and a small MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::gaussian::GaussianCloud;
use crate::{CoreError, Result};

pub const EMBED_DIM: usize = 16;
pub const HIDDEN: usize = 64;
/// Default number of sine/cosine octaves encoding each position coordinate.
pub const POSITION_OCTAVES: usize = 5;
const CHUNK: usize = 128;

/// Δf_SH,t = MLP(E_t, x, f_SH) with two ReLU hidden layers and a
/// zero-initialized output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    pub frames: usize,
    pub sh_width: usize,
    /// Octaves `k` of the `sin(2ᵏx)`, `cos(2ᵏx)` features appended to the
    /// raw position (meters, object frame).
    pub pos_octaves: usize,
    /// `frames × EMBED_DIM`, row-major.
    pub embeddings: Vec<f64>,
    /// w1, b1, w2, b2, w3, b3 concatenated; matrices are row-major (out × in).
    pub weights: Vec<f64>,
    /// Frames whose embedding received training signal.
    pub trained: Vec<bool>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceGrads {
    pub weights: Vec<f64>,
    pub embedding: [f64; EMBED_DIM],
    pub mu: Vec<[f64; 3]>,
    pub sh: Vec<f64>,
}

impl AppearanceModel {
    pub fn new(frames: usize, sh_width: usize, pos_octaves: usize, seed: u64) -> AppearanceModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = (0..frames * EMBED_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut m = AppearanceModel { frames, sh_width, pos_octaves, embeddings, weights: Vec::new(), trained: vec![false; frames] };
        let l = m.layout();
        m.weights = vec![0.0; l.len];
        let input = m.input_dim();
        let b1 = (6.0 / input as f64).sqrt();
        for w in &mut m.weights[l.w1..l.b1] {
            *w = rng.random_range(-b1..b1);
        }
        let b2 = (6.0 / HIDDEN as f64).sqrt();
        for w in &mut m.weights[l.w2..l.b2] {
            *w = rng.random_range(-b2..b2);
        }
        m
    }

    fn position_dim(&self) -> usize {
        3 + 6 * self.pos_octaves
    }

    pub fn input_dim(&self) -> usize {
        EMBED_DIM + self.position_dim() + self.sh_width
    }

    fn layout(&self) -> Layout {
        let i = self.input_dim();
        let w1 = 0;
        let b1 = w1 + HIDDEN * i;
        let w2 = b1 + HIDDEN;
        let b2 = w2 + HIDDEN * HIDDEN;
        let w3 = b2 + HIDDEN;
        let b3 = w3 + self.sh_width * HIDDEN;
        Layout { w1, b1, w2, b2, w3, b3, len: b3 + self.sh_width }
    }

    /// Length of `weights` for this input layout.
    pub fn weight_count(&self) -> usize {
        self.layout().len
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layout();
        if self.weights.len() != l.len || self.embeddings.len() != self.frames * EMBED_DIM || self.trained.len() != self.frames {
            return Err(CoreError::InvalidSize(format!(
                "appearance model with {} weights / {} embedding values for {} frames",
                self.weights.len(),
                self.embeddings.len(),
                self.frames
            )));
        }
        Ok(())
    }

    /// Embedding of a training frame.
    pub fn embedding(&self, t: usize) -> Result<[f64; EMBED_DIM]> {
        if t >= self.frames {
            return Err(CoreError::FrameOutOfRange { frame: t, count: self.frames });
        }
        let mut e = [0.0; EMBED_DIM];
        e.copy_from_slice(&self.embeddings[t * EMBED_DIM..(t + 1) * EMBED_DIM]);
        Ok(e)
    }

    /// Embedding for rendering: trained frames use their own row, other frames
    /// interpolate the nearest trained rows, and out-of-range frames clamp.
    /// The flag is set when `t` was clamped.
    pub fn embedding_at(&self, t: usize) -> ([f64; EMBED_DIM], bool) {
        let clamped = t >= self.frames;
        let t = t.min(self.frames.saturating_sub(1));
        if self.trained.get(t).copied().unwrap_or(false) || !self.trained.iter().any(|&b| b) {
            return (self.embedding(t).unwrap_or([0.0; EMBED_DIM]), clamped);
        }
        let before = (0..t).rev().find(|&k| self.trained[k]);
        let after = (t + 1..self.frames).find(|&k| self.trained[k]);
        let e = match (before, after) {
            (Some(a), Some(b)) => {
                let f = (t - a) as f64 / (b - a) as f64;
                let (ea, eb) = (self.embedding(a).unwrap(), self.embedding(b).unwrap());
                std::array::from_fn(|k| (1.0 - f) * ea[k] + f * eb[k])
            }
            (Some(a), None) => self.embedding(a).unwrap(),
            (None, Some(b)) => self.embedding(b).unwrap(),
            (None, None) => unreachable!("some frame is trained"),
        };
        (e, clamped)
    }

    fn input(&self, e: &[f64; EMBED_DIM], cloud: &GaussianCloud, i: usize, buf: &mut [f64]) {
        buf[..EMBED_DIM].copy_from_slice(e);
        let x = cloud.mu[i];
        buf[EMBED_DIM..EMBED_DIM + 3].copy_from_slice(&x);
        let mut o = EMBED_DIM + 3;
        for k in 0..self.pos_octaves {
            let f = (1u64 << k) as f64;
            for xj in x {
                let (s, c) = (f * xj).sin_cos();
                buf[o] = s;
                buf[o + 1] = c;
                o += 2;
            }
        }
        buf[EMBED_DIM + self.position_dim()..].copy_from_slice(cloud.sh_of(i));
    }

    /// Gradient w.r.t. the raw position from the gradient w.r.t. its encoding.
    fn position_backward(&self, x: &[f64; 3], d: &[f64]) -> [f64; 3] {
        let mut g = [d[0], d[1], d[2]];
        let mut o = 3;
        for k in 0..self.pos_octaves {
            let f = (1u64 << k) as f64;
            for j in 0..3 {
                let (s, c) = (f * x[j]).sin_cos();
                g[j] += f * (c * d[o] - s * d[o + 1]);
                o += 2;
            }
        }
        g
    }

    /// Hidden activations (post-ReLU) and the output for one input.
    fn forward_one(&self, x: &[f64], h1: &mut [f64; HIDDEN], h2: &mut [f64; HIDDEN], out: &mut [f64]) {
        let l = self.layout();
        let w = &self.weights;
        let ni = x.len();
        for j in 0..HIDDEN {
            let row = &w[l.w1 + j * ni..l.w1 + (j + 1) * ni];
            let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[l.b1 + j];
            h1[j] = s.max(0.0);
        }
        for j in 0..HIDDEN {
            let row = &w[l.w2 + j * HIDDEN..l.w2 + (j + 1) * HIDDEN];
            let s: f64 = row.iter().zip(h1.iter()).map(|(a, b)| a * b).sum::<f64>() + w[l.b2 + j];
            h2[j] = s.max(0.0);
        }
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[l.w3 + j * HIDDEN..l.w3 + (j + 1) * HIDDEN];
            *o = row.iter().zip(h2.iter()).map(|(a, b)| a * b).sum::<f64>() + w[l.b3 + j];
        }
    }

    /// Residual SH for every Gaussian of `cloud` (same layout as `cloud.sh`).
    pub fn residuals(&self, e: &[f64; EMBED_DIM], cloud: &GaussianCloud) -> Vec<f64> {
        assert_eq!(cloud.sh_width(), self.sh_width, "sh width mismatch");
        let sw = self.sh_width;
        let mut out = vec![0.0; cloud.sh.len()];
        out.par_chunks_mut(sw * CHUNK).enumerate().for_each(|(c, block)| {
            let mut x = vec![0.0; self.input_dim()];
            let (mut h1, mut h2) = ([0.0; HIDDEN], [0.0; HIDDEN]);
            for (k, o) in block.chunks_mut(sw).enumerate() {
                self.input(e, cloud, c * CHUNK + k, &mut x);
                self.forward_one(&x, &mut h1, &mut h2, o);
            }
        });
        out
    }

    /// Backpropagates `d_res` (gradient w.r.t. the residuals) to the weights,
    /// the embedding and the MLP inputs (positions and SH).
    pub fn backward(&self, e: &[f64; EMBED_DIM], cloud: &GaussianCloud, d_res: &[f64]) -> AppearanceGrads {
        let sw = self.sh_width;
        let n = cloud.len();
        assert_eq!(d_res.len(), n * sw, "residual gradient length");
        let l = self.layout();
        let ni = self.input_dim();
        let w = &self.weights;
        let chunks: Vec<(Vec<f64>, [f64; EMBED_DIM], Vec<[f64; 3]>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let range = c * CHUNK..((c + 1) * CHUNK).min(n);
                let mut gw = vec![0.0; l.len];
                let mut ge = [0.0; EMBED_DIM];
                let mut gmu = Vec::with_capacity(range.len());
                let mut gsh = Vec::with_capacity(range.len() * sw);
                let mut x = vec![0.0; ni];
                let mut out = vec![0.0; sw];
                let (mut h1, mut h2) = ([0.0; HIDDEN], [0.0; HIDDEN]);
                for i in range {
                    let d = &d_res[i * sw..(i + 1) * sw];
                    if d.iter().all(|&v| v == 0.0) {
                        gmu.push([0.0; 3]);
                        gsh.extend(std::iter::repeat_n(0.0, sw));
                        continue;
                    }
                    self.input(e, cloud, i, &mut x);
                    self.forward_one(&x, &mut h1, &mut h2, &mut out);
                    let mut dh2 = [0.0; HIDDEN];
                    for (j, &dj) in d.iter().enumerate() {
                        gw[l.b3 + j] += dj;
                        for k in 0..HIDDEN {
                            gw[l.w3 + j * HIDDEN + k] += dj * h2[k];
                            dh2[k] += dj * w[l.w3 + j * HIDDEN + k];
                        }
                    }
                    let mut dh1 = [0.0; HIDDEN];
                    for j in 0..HIDDEN {
                        if h2[j] <= 0.0 {
                            continue;
                        }
                        let dj = dh2[j];
                        gw[l.b2 + j] += dj;
                        for k in 0..HIDDEN {
                            gw[l.w2 + j * HIDDEN + k] += dj * h1[k];
                            dh1[k] += dj * w[l.w2 + j * HIDDEN + k];
                        }
                    }
                    let mut dx = vec![0.0; ni];
                    for j in 0..HIDDEN {
                        if h1[j] <= 0.0 {
                            continue;
                        }
                        let dj = dh1[j];
                        gw[l.b1 + j] += dj;
                        for k in 0..ni {
                            gw[l.w1 + j * ni + k] += dj * x[k];
                            dx[k] += dj * w[l.w1 + j * ni + k];
                        }
                    }
                    for k in 0..EMBED_DIM {
                        ge[k] += dx[k];
                    }
                    let pd = self.position_dim();
                    gmu.push(self.position_backward(&cloud.mu[i], &dx[EMBED_DIM..EMBED_DIM + pd]));
                    gsh.extend_from_slice(&dx[EMBED_DIM + pd..]);
                }
                (gw, ge, gmu, gsh)
            })
            .collect();
        let mut g = AppearanceGrads { weights: vec![0.0; l.len], embedding: [0.0; EMBED_DIM], mu: Vec::with_capacity(n), sh: Vec::with_capacity(n * sw) };
        for (gw, ge, gmu, gsh) in chunks {
            for (a, b) in g.weights.iter_mut().zip(&gw) {
                *a += b;
            }
            for k in 0..EMBED_DIM {
                g.embedding[k] += ge[k];
            }
            g.mu.extend(gmu);
            g.sh.extend(gsh);
        }
        g
    }
}
