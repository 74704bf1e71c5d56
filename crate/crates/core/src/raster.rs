//! Tile-based differentiable Gaussian splatting on the CPU.
//!
//! Gaussians are projected with the local-affine (EWA) approximation, sorted
//! once globally by camera depth (ties broken by source index), binned into
//! 16×16 tiles from their 3σ bounding boxes and composited front to back.
//! The backward pass mirrors the forward pass per tile and merges per-tile
//! partial gradients in tile order, so results do not depend on thread count.

use autosplat_scene::{CameraView, ColorImage};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::gaussian::{normalized, quat_to_matrix, rotation_backward, sigmoid, CloudGrads, GaussianCloud};
use crate::sh;

pub const TILE: usize = 16;
pub const NEAR_PLANE: f64 = 0.05;
pub const LOW_PASS: f64 = 0.3;
pub const T_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 0.99;
/// Squared Mahalanobis radius of a splat's support.
pub const SUPPORT: f64 = 9.0;
/// Centers projecting further outside the image than this fraction of its
/// size are culled; the local-affine approximation breaks down there.
pub const GUARD_BAND: f64 = 0.15;

/// World-space Gaussians with activated attributes, ready for splatting.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderScene {
    pub sh_degree: usize,
    pub mu: Vec<Vector3<f64>>,
    pub rot: Vec<Matrix3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub sh: Vec<f64>,
    /// SH of Gaussian `i` is expressed in frame `frames[frame_of[i]]`: the basis
    /// is evaluated at `frameᵀ · view_dir`.
    pub frame_of: Vec<u32>,
    pub frames: Vec<Matrix3<f64>>,
}

impl RenderScene {
    pub fn new(sh_degree: usize) -> Self {
        RenderScene {
            sh_degree,
            mu: Vec::new(),
            rot: Vec::new(),
            scale: Vec::new(),
            opacity: Vec::new(),
            sh: Vec::new(),
            frame_of: Vec::new(),
            frames: vec![Matrix3::identity()],
        }
    }

    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        let mut s = RenderScene::new(cloud.sh_degree);
        s.push_cloud(cloud, None, None);
        s
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sh_width(&self) -> usize {
        3 * sh::coeff_count(self.sh_degree)
    }

    /// Appends a cloud, optionally posed by `x ↦ R x + t` (its SH then live in
    /// frame `R`) and with replacement SH coefficients. Returns the index range.
    pub fn push_cloud(
        &mut self,
        cloud: &GaussianCloud,
        pose: Option<(&Matrix3<f64>, &Vector3<f64>)>,
        sh_override: Option<&[f64]>,
    ) -> std::ops::Range<usize> {
        assert_eq!(cloud.sh_degree, self.sh_degree, "sh degree mismatch");
        let start = self.len();
        let frame = match pose {
            Some((r, _)) => {
                self.frames.push(*r);
                (self.frames.len() - 1) as u32
            }
            None => 0,
        };
        for i in 0..cloud.len() {
            let r_local = quat_to_matrix(&normalized(cloud.rot[i]));
            let mu = Vector3::from(cloud.mu[i]);
            match pose {
                Some((r, t)) => {
                    self.mu.push(r * mu + t);
                    self.rot.push(r * r_local);
                }
                None => {
                    self.mu.push(mu);
                    self.rot.push(r_local);
                }
            }
            self.scale.push(cloud.scale(i));
            self.opacity.push(cloud.opacity(i));
            self.frame_of.push(frame);
        }
        match sh_override {
            Some(s) => {
                assert_eq!(s.len(), cloud.sh.len(), "override sh length");
                self.sh.extend_from_slice(s);
            }
            None => self.sh.extend_from_slice(&cloud.sh),
        }
        start..self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub center: [f64; 2],
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d` as (a, b, c) for [[a, b], [b, c]].
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    pub source: usize,
    /// Pixel bounding box of the 3σ ellipse: x0, y0, x1, y1 (inclusive, clipped).
    pub bbox: [i64; 4],
}

impl Splat2D {
    #[inline]
    fn power(&self, px: f64, py: f64) -> Option<(f64, f64, f64)> {
        let dx = px - self.center[0];
        let dy = py - self.center[1];
        let [a, b, c] = self.conic;
        let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        (m <= SUPPORT).then_some((0.5 * m, dx, dy))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub degenerate: usize,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ColorImage,
    pub alpha: Vec<f64>,
    pub contributors: Vec<u32>,
    pub stats: RenderStats,
    state: ForwardState,
}

impl RenderOutput {
    /// Source index of every splat that survived culling.
    pub fn visible_sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.state.splats.iter().map(|s| s.source)
    }
}

#[derive(Debug, Clone)]
struct ForwardState {
    /// Visible splats in depth order.
    splats: Vec<Splat2D>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    /// Unclamped composited color.
    raw: Vec<f64>,
    /// Number of tile-list entries walked by each pixel.
    last: Vec<u32>,
}

struct Projected {
    splat: Splat2D,
}

fn project_one(scene: &RenderScene, i: usize, view: &CameraView, w2c: &Matrix3<f64>, c: &Vector3<f64>) -> Result<Option<Projected>, ()> {
    let k = &view.intrinsics;
    let pc = w2c * (scene.mu[i] - c);
    if pc.z < NEAR_PLANE {
        return Ok(None);
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let center = [k.fx * x / z + k.cx, k.fy * y / z + k.cy];
    let (w, h) = (view.width as f64, view.height as f64);
    if center[0] < -GUARD_BAND * w || center[0] > (1.0 + GUARD_BAND) * w || center[1] < -GUARD_BAND * h || center[1] > (1.0 + GUARD_BAND) * h {
        return Ok(None);
    }
    let j = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    let t = j * w2c;
    let m = scene.rot[i] * Matrix3::from_diagonal(&scene.scale[i]);
    let sigma = m * m.transpose();
    let cov = t * sigma * t.transpose();
    let (a, b, cc) = (cov[(0, 0)] + LOW_PASS, 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)] + LOW_PASS);
    let det = a * cc - b * b;
    let mid = 0.5 * (a + cc);
    let min_eig = mid - (0.25 * (a - cc) * (a - cc) + b * b).sqrt();
    if !(min_eig >= 1e-12 && det > 0.0) || !det.is_finite() {
        return Err(());
    }
    let (rx, ry) = (3.0 * a.sqrt(), 3.0 * cc.sqrt());
    if center[0] + rx < 0.0 || center[0] - rx > w || center[1] + ry < 0.0 || center[1] - ry > h {
        return Ok(None);
    }
    // pixel i covers [i, i+1) with its sample at i + 0.5
    let bbox = [
        ((center[0] - rx - 0.5).ceil() as i64).max(0),
        ((center[1] - ry - 0.5).ceil() as i64).max(0),
        ((center[0] + rx - 0.5).floor() as i64).min(view.width as i64 - 1),
        ((center[1] + ry - 0.5).floor() as i64).min(view.height as i64 - 1),
    ];
    let dir_w = (scene.mu[i] - c).normalize();
    let frame = &scene.frames[scene.frame_of[i] as usize];
    let dir = frame.transpose() * dir_w;
    let w_sh = scene.sh_width();
    let color = sh::eval_sh_color(&scene.sh[i * w_sh..(i + 1) * w_sh], &dir, scene.sh_degree);
    Ok(Some(Projected {
        splat: Splat2D {
            center,
            cov2d: [a, b, cc],
            conic: [cc / det, -b / det, a / det],
            depth: z,
            color,
            opacity: scene.opacity[i],
            source: i,
            bbox,
        },
    }))
}

/// Projects every Gaussian; returns visible splats in ascending depth order.
pub fn project(scene: &RenderScene, view: &CameraView) -> (Vec<Splat2D>, RenderStats) {
    let w2c = view.world_to_camera_rotation();
    let c = view.center();
    let results: Vec<Result<Option<Projected>, ()>> = (0..scene.len())
        .into_par_iter()
        .map(|i| project_one(scene, i, view, &w2c, &c))
        .collect();
    let mut stats = RenderStats::default();
    let mut splats = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(Some(p)) => splats.push(p.splat),
            Ok(None) => stats.culled += 1,
            Err(()) => stats.degenerate += 1,
        }
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
    stats.visible = splats.len();
    (splats, stats)
}

/// Front-to-back compositing of depth-sorted splats at one pixel sample.
pub fn composite(splats: &[Splat2D], px: f64, py: f64) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for s in splats {
        let Some((power, _, _)) = s.power(px, py) else {
            continue;
        };
        let sigma = (s.opacity * (-power).exp()).min(SIGMA_MAX);
        for ch in 0..3 {
            c[ch] += s.color[ch] * sigma * t;
        }
        t *= 1.0 - sigma;
        if t < T_MIN {
            break;
        }
    }
    (c, 1.0 - t)
}

fn bin_tiles(splats: &[Splat2D], tiles_x: usize, tiles_y: usize) -> Vec<Vec<u32>> {
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (idx, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.bbox;
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                tiles[ty * tiles_x + tx].push(idx as u32);
            }
        }
    }
    tiles
}

struct TilePixels {
    raw: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    count: Vec<u32>,
    last: Vec<u32>,
}

fn tile_rect(tile: usize, tiles_x: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    (x0, y0, (x0 + TILE).min(w), (y0 + TILE).min(h))
}

pub fn render(scene: &RenderScene, view: &CameraView) -> RenderOutput {
    let (w, h) = (view.width as usize, view.height as usize);
    let (splats, stats) = project(scene, view);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let tiles = bin_tiles(&splats, tiles_x, tiles_y);

    let per_tile: Vec<TilePixels> = (0..tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = tile_rect(tile, tiles_x, w, h);
            let list = &tiles[tile];
            let n = (x1 - x0) * (y1 - y0);
            let mut out = TilePixels {
                raw: Vec::with_capacity(n),
                alpha: Vec::with_capacity(n),
                count: Vec::with_capacity(n),
                last: Vec::with_capacity(n),
            };
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    let mut count = 0u32;
                    let mut last = list.len() as u32;
                    for (pos, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let Some((power, _, _)) = s.power(px, py) else {
                            continue;
                        };
                        let sigma = (s.opacity * (-power).exp()).min(SIGMA_MAX);
                        for ch in 0..3 {
                            c[ch] += s.color[ch] * sigma * t;
                        }
                        t *= 1.0 - sigma;
                        count += 1;
                        if t < T_MIN {
                            last = pos as u32 + 1;
                            break;
                        }
                    }
                    out.raw.push(c);
                    out.alpha.push(1.0 - t);
                    out.count.push(count);
                    out.last.push(last);
                }
            }
            out
        })
        .collect();

    let mut image = ColorImage::new(w, h);
    let mut raw = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    let mut contributors = vec![0u32; w * h];
    let mut last = vec![0u32; w * h];
    for (tile, px) in per_tile.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_rect(tile, tiles_x, w, h);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                raw[3 * p..3 * p + 3].copy_from_slice(&px.raw[k]);
                image.set(x, y, px.raw[k].map(|v| v.clamp(0.0, 1.0)));
                alpha[p] = px.alpha[k];
                contributors[p] = px.count[k];
                last[p] = px.last[k];
                k += 1;
            }
        }
    }
    RenderOutput {
        image,
        alpha,
        contributors,
        stats,
        state: ForwardState {
            splats,
            tiles,
            tiles_x,
            raw,
            last,
        },
    }
}

/// Gradients w.r.t. the activated world-space attributes of a [`RenderScene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub mu: Vec<Vector3<f64>>,
    /// Gradient w.r.t. each Gaussian's world rotation matrix.
    pub rot: Vec<Matrix3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub sh: Vec<f64>,
    /// Gradient w.r.t. each SH frame matrix through the view direction.
    pub frames: Vec<Matrix3<f64>>,
    /// Norm of the projected-center gradient in normalized device units.
    pub screen: Vec<f64>,
}

impl SceneGrads {
    pub fn zeros(scene: &RenderScene) -> Self {
        let n = scene.len();
        SceneGrads {
            mu: vec![Vector3::zeros(); n],
            rot: vec![Matrix3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            opacity: vec![0.0; n],
            sh: vec![0.0; scene.sh.len()],
            frames: vec![Matrix3::zeros(); scene.frames.len()],
            screen: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Default)]
struct Grad2D {
    center: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

struct Contribution {
    pos: usize,
    sigma: f64,
    g: f64,
    t: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Backpropagates `d_image` (H×W×3, gradient of the loss w.r.t. the clamped image).
pub fn render_backward(scene: &RenderScene, view: &CameraView, out: &RenderOutput, d_image: &[f64]) -> SceneGrads {
    let (w, h) = (view.width as usize, view.height as usize);
    assert_eq!(d_image.len(), w * h * 3, "gradient image size");
    let st = &out.state;
    let splats = &st.splats;

    let per_tile: Vec<Vec<Grad2D>> = (0..st.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let list = &st.tiles[tile];
            let mut local = vec![Grad2D::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let (x0, y0, x1, y1) = tile_rect(tile, st.tiles_x, w, h);
            let mut contrib: Vec<Contribution> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    let mut dc = [0.0; 3];
                    let mut any = false;
                    for ch in 0..3 {
                        let raw = st.raw[3 * p + ch];
                        if raw <= 1.0 && raw >= 0.0 {
                            dc[ch] = d_image[3 * p + ch];
                            any |= dc[ch] != 0.0;
                        }
                    }
                    if !any {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    contrib.clear();
                    let mut t = 1.0;
                    for (pos, &si) in list.iter().take(st.last[p] as usize).enumerate() {
                        let s = &splats[si as usize];
                        let Some((power, dx, dy)) = s.power(px, py) else {
                            continue;
                        };
                        let g = (-power).exp();
                        let raw_sigma = s.opacity * g;
                        let clamped = raw_sigma > SIGMA_MAX;
                        let sigma = raw_sigma.min(SIGMA_MAX);
                        contrib.push(Contribution { pos, sigma, g, t, dx, dy, clamped });
                        t *= 1.0 - sigma;
                    }
                    // walk back to front; `after` = Σ_{j>i} c_j σ_j T_j
                    let mut after = [0.0; 3];
                    for k in contrib.iter().rev() {
                        let s = &splats[list[k.pos] as usize];
                        let lg = &mut local[k.pos];
                        let mut d_sigma = 0.0;
                        for ch in 0..3 {
                            lg.color[ch] += k.sigma * k.t * dc[ch];
                            d_sigma += dc[ch] * (s.color[ch] * k.t - after[ch] / (1.0 - k.sigma));
                            after[ch] += s.color[ch] * k.sigma * k.t;
                        }
                        if k.clamped {
                            continue;
                        }
                        lg.opacity += d_sigma * k.g;
                        let d_power = -d_sigma * s.opacity * k.g;
                        let [a, b, c] = s.conic;
                        lg.center[0] += -d_power * (a * k.dx + b * k.dy);
                        lg.center[1] += -d_power * (b * k.dx + c * k.dy);
                        lg.conic[0] += d_power * 0.5 * k.dx * k.dx;
                        lg.conic[1] += d_power * k.dx * k.dy;
                        lg.conic[2] += d_power * 0.5 * k.dy * k.dy;
                    }
                }
            }
            local
        })
        .collect();

    let mut g2d = vec![Grad2D::default(); splats.len()];
    for (tile, local) in per_tile.iter().enumerate() {
        for (pos, lg) in local.iter().enumerate() {
            let acc = &mut g2d[st.tiles[tile][pos] as usize];
            for k in 0..2 {
                acc.center[k] += lg.center[k];
            }
            for k in 0..3 {
                acc.conic[k] += lg.conic[k];
                acc.color[k] += lg.color[k];
            }
            acc.opacity += lg.opacity;
        }
    }

    let w2c = view.world_to_camera_rotation();
    let cam = view.center();
    let k = view.intrinsics;
    let sw = scene.sh_width();
    let ncoef = sh::coeff_count(scene.sh_degree);

    struct Out3D {
        source: usize,
        mu: Vector3<f64>,
        rot: Matrix3<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        sh: Vec<f64>,
        frame: Matrix3<f64>,
        screen: f64,
    }

    let per_splat: Vec<Out3D> = splats
        .par_iter()
        .zip(g2d.par_iter())
        .map(|(s, g)| {
            let i = s.source;
            let v = scene.mu[i] - cam;
            let vn = v.norm();
            let dir_w = v / vn;
            let fidx = scene.frame_of[i] as usize;
            let frame = &scene.frames[fidx];
            let dir = frame.transpose() * dir_w;
            let coeffs = &scene.sh[i * sw..(i + 1) * sw];
            let raw = sh::raw_color(coeffs, scene.sh_degree, &dir);
            let mut g_raw = [0.0; 3];
            for ch in 0..3 {
                if raw[ch] + 0.5 >= 0.0 {
                    g_raw[ch] = g.color[ch];
                }
            }
            let basis = sh::basis(scene.sh_degree, &dir);
            let jac = sh::basis_jacobian(scene.sh_degree, &dir);
            let mut d_sh = vec![0.0; sw];
            let mut g_dir = Vector3::zeros();
            for kk in 0..ncoef {
                let mut wsum = 0.0;
                for ch in 0..3 {
                    d_sh[kk * 3 + ch] = basis[kk] * g_raw[ch];
                    wsum += coeffs[kk * 3 + ch] * g_raw[ch];
                }
                g_dir += Vector3::from(jac[kk]) * wsum;
            }
            let g_dir_w = frame * g_dir;
            let d_frame = dir_w * g_dir.transpose();
            let mut d_mu = (g_dir_w - dir_w * dir_w.dot(&g_dir_w)) / vn;

            // conic -> 2D covariance
            let [ca, cb, cc] = s.conic;
            let a_m = Matrix2::new(ca, cb, cb, cc);
            let g_a = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
            let d_cov2 = -(a_m * g_a * a_m);

            let pc = w2c * v;
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let j = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
            let t = j * w2c;
            let sc = scene.scale[i];
            let m = scene.rot[i] * Matrix3::from_diagonal(&sc);
            let sigma = m * m.transpose();
            let d_sigma = t.transpose() * d_cov2 * t;
            let d_t = 2.0 * d_cov2 * t * sigma;
            let d_j = d_t * w2c.transpose();
            let d_m = 2.0 * d_sigma * m;
            let mut d_rot = Matrix3::zeros();
            let mut d_scale = Vector3::zeros();
            for col in 0..3 {
                for row in 0..3 {
                    d_rot[(row, col)] = d_m[(row, col)] * sc[col];
                    d_scale[col] += d_m[(row, col)] * scene.rot[i][(row, col)];
                }
            }

            let (gu, gv) = (g.center[0], g.center[1]);
            let z2 = z * z;
            let z3 = z2 * z;
            let d_pc = Vector3::new(
                gu * k.fx / z + d_j[(0, 2)] * (-k.fx / z2),
                gv * k.fy / z + d_j[(1, 2)] * (-k.fy / z2),
                gu * (-k.fx * x / z2)
                    + gv * (-k.fy * y / z2)
                    + d_j[(0, 0)] * (-k.fx / z2)
                    + d_j[(0, 2)] * (2.0 * k.fx * x / z3)
                    + d_j[(1, 1)] * (-k.fy / z2)
                    + d_j[(1, 2)] * (2.0 * k.fy * y / z3),
            );
            d_mu += w2c.transpose() * d_pc;
            let screen = (gu * 0.5 * w as f64).hypot(gv * 0.5 * h as f64);
            Out3D {
                source: i,
                mu: d_mu,
                rot: d_rot,
                scale: d_scale,
                opacity: g.opacity,
                sh: d_sh,
                frame: d_frame,
                screen,
            }
        })
        .collect();

    let mut grads = SceneGrads::zeros(scene);
    for o in per_splat {
        let i = o.source;
        grads.mu[i] = o.mu;
        grads.rot[i] = o.rot;
        grads.scale[i] = o.scale;
        grads.opacity[i] = o.opacity;
        grads.sh[i * sw..(i + 1) * sw].copy_from_slice(&o.sh);
        grads.frames[scene.frame_of[i] as usize] += o.frame;
        grads.screen[i] = o.screen;
    }
    grads
}

/// Adds the gradients of Gaussians `range` of a render scene to the raw
/// parameters of the cloud they were pushed from. `pose_rot` is the rotation
/// the cloud was posed with, if any.
pub fn accumulate_cloud_grads(
    cloud: &GaussianCloud,
    grads: &SceneGrads,
    range: std::ops::Range<usize>,
    pose_rot: Option<&Matrix3<f64>>,
    into: &mut CloudGrads,
) {
    assert_eq!(range.len(), cloud.len(), "range does not match cloud");
    let sw = cloud.sh_width();
    for (i, si) in range.enumerate() {
        let (dmu, drot) = match pose_rot {
            Some(r) => (r.transpose() * grads.mu[si], r.transpose() * grads.rot[si]),
            None => (grads.mu[si], grads.rot[si]),
        };
        for k in 0..3 {
            into.mu[i][k] += dmu[k];
        }
        let dq = rotation_backward(&cloud.rot[i], &drot);
        for k in 0..4 {
            into.rot[i][k] += dq[k];
        }
        let s = cloud.scale(i);
        for k in 0..3 {
            into.log_scale[i][k] += grads.scale[si][k] * s[k];
        }
        let o = sigmoid(cloud.opacity_logit[i]);
        into.opacity_logit[i] += grads.opacity[si] * o * (1.0 - o);
        for k in 0..sw {
            into.sh[i * sw + k] += grads.sh[si * sw + k];
        }
        into.screen[i] += grads.screen[si];
    }
}

/// Per-pixel linear-to-8-bit dump of a render.
pub fn save_debug_png(out: &RenderOutput, path: &std::path::Path) -> Result<(), autosplat_scene::SceneError> {
    out.image.save_png(path)
}
