//! Background reconstruction: class assignment, sky plane, two-phase training.

use autosplat_scene::image::{LABEL_OTHER, LABEL_ROAD, LABEL_SKY};
use autosplat_scene::{CameraView, Frame, SceneBundle, SemanticMask, Split};
use log::{info, warn};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gaussian::{extract_roll_pitch, CloudGrads, GaussianCloud};
use crate::init::{cloud_from_points, nearest_frame_colors};
use crate::loss::{flatness_penalty, photometric_loss, LossWeights};
use crate::optim::{densify_and_prune, CloudOptimizer, DensifyConfig, DensifyStats, LearningRates};
use crate::raster::{accumulate_cloud_grads, render, render_backward, RenderScene};
use crate::{ClassTag, CoreError, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassAssignment {
    pub classes: Vec<ClassTag>,
    /// Points never seen on a background pixel of any frame.
    pub unobserved: usize,
}

/// Majority vote over the mask labels each point projects onto. Ties and
/// unobserved points become `Other`; pixels covered by an object do not vote.
pub fn assign_classes(points: &[Vector3<f64>], frames: &[(&CameraView, &SemanticMask)]) -> ClassAssignment {
    let mut out = ClassAssignment::default();
    for p in points {
        let mut votes = [0usize; 3];
        for (cam, mask) in frames {
            let Some((u, v, _)) = cam.project(p) else { continue };
            if !cam.in_bounds(u, v) {
                continue;
            }
            let idx = v as usize * mask.width + u as usize;
            if mask.instance[idx] != 0 {
                continue;
            }
            match mask.labels[idx] {
                LABEL_ROAD => votes[1] += 1,
                LABEL_SKY => votes[2] += 1,
                _ => votes[0] += 1,
            }
        }
        let total: usize = votes.iter().sum();
        if total == 0 {
            out.unobserved += 1;
        }
        let class = if votes[1] > votes[0] && votes[1] > votes[2] {
            ClassTag::Road
        } else if votes[2] > votes[0] && votes[2] > votes[1] {
            ClassTag::Sky
        } else {
            ClassTag::Other
        };
        out.classes.push(class);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkyPlaneConfig {
    /// Points per square meter.
    pub density: f64,
    /// Height above the highest scene point (meters).
    pub margin: f64,
    /// Horizontal extent as a multiple of the scene bounds.
    pub extension: f64,
    /// Grow the plane to cover every training-view sky ray that misses it.
    pub cover_views: bool,
    /// Sky rays are followed at most this far horizontally from the camera.
    pub max_distance: f64,
    /// Point budget for the coarser ring that extends the plane to the views.
    pub max_outer_points: usize,
}

impl Default for SkyPlaneConfig {
    fn default() -> Self {
        SkyPlaneConfig { density: 0.25, margin: 20.0, extension: 1.5, cover_views: true, max_distance: 500.0, max_outer_points: 8000 }
    }
}

/// Horizontal rectangle `[min, max]` in world xy.
pub type Extent = (Vector2<f64>, Vector2<f64>);

pub fn sky_height(bounds_max: &Vector3<f64>, cfg: &SkyPlaneConfig) -> f64 {
    bounds_max.z + cfg.margin
}

/// Scene xy bounds scaled about their center by `cfg.extension`.
pub fn sky_extent(bounds_min: &Vector3<f64>, bounds_max: &Vector3<f64>, cfg: &SkyPlaneConfig) -> Extent {
    let c = (bounds_min.xy() + bounds_max.xy()) / 2.0;
    let half = (bounds_max.xy() - bounds_min.xy()) * (cfg.extension / 2.0);
    (c - half, c + half)
}

/// Regular grid of `round(Lx·√ρ) × round(Ly·√ρ)` points over `extent` at height `z`.
pub fn sky_grid(extent: &Extent, z: f64, density: f64) -> Vec<Vector3<f64>> {
    let size = extent.1 - extent.0;
    let step = 1.0 / density.sqrt();
    let nx = ((size.x / step).round() as usize).max(1);
    let ny = ((size.y / step).round() as usize).max(1);
    let mut pts = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = extent.0.x + size.x * (i as f64 + 0.5) / nx as f64;
            let y = extent.0.y + size.y * (j as f64 + 0.5) / ny as f64;
            pts.push(Vector3::new(x, y, z));
        }
    }
    pts
}

/// Sky points above the scene: a grid at `max height + margin` covering the
/// extended scene bounds. Every returned point is classified Sky.
pub fn inject_sky_plane(bounds_min: &Vector3<f64>, bounds_max: &Vector3<f64>, cfg: &SkyPlaneConfig) -> Vec<Vector3<f64>> {
    sky_grid(&sky_extent(bounds_min, bounds_max, cfg), sky_height(bounds_max, cfg), cfg.density)
}

/// Bounding rectangle of where the sky pixels of `frames` meet the plane `z`,
/// following each ray at most `max_distance` horizontally.
pub fn sky_footprint(frames: &[&Frame], z: f64, max_distance: f64) -> Option<Extent> {
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for f in frames {
        let m = &f.mask;
        for y in 0..m.height {
            for x in 0..m.width {
                let i = y * m.width + x;
                if m.labels[i] != LABEL_SKY || m.instance[i] != 0 {
                    continue;
                }
                let (o, d) = f.camera.ray(x as f64 + 0.5, y as f64 + 0.5);
                if d.z <= 1e-6 || o.z >= z {
                    continue;
                }
                let horizontal = d.xy().norm();
                let mut s = (z - o.z) / d.z;
                if horizontal * s > max_distance {
                    s = max_distance / horizontal;
                }
                let p = o + d * s;
                lo = lo.inf(&p.xy());
                hi = hi.sup(&p.xy());
                any = true;
            }
        }
    }
    any.then_some((lo, hi))
}

/// Points covering `footprint` outside `base`, at the configured density or
/// coarser so that at most `max_outer_points` are added.
pub fn sky_outer_ring(base: &Extent, footprint: &Extent, z: f64, cfg: &SkyPlaneConfig) -> Vec<Vector3<f64>> {
    let full = (base.0.inf(&footprint.0), base.1.sup(&footprint.1));
    let area = |e: &Extent| (e.1.x - e.0.x).max(0.0) * (e.1.y - e.0.y).max(0.0);
    let outer = area(&full) - area(base);
    if outer <= 0.0 || cfg.max_outer_points == 0 {
        return Vec::new();
    }
    let density = cfg.density.min(cfg.max_outer_points as f64 / outer);
    let inside = |p: &Vector3<f64>| p.x >= base.0.x && p.x <= base.1.x && p.y >= base.0.y && p.y <= base.1.y;
    sky_grid(&full, z, density).into_iter().filter(|p| !inside(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub sh_degree: usize,
    pub sky: SkyPlaneConfig,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig { phase1_iters: 15_000, phase2_iters: 15_000, sh_degree: 2, sky: SkyPlaneConfig::default() }
    }
}

/// Settings shared by every training stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub weights: LossWeights,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.lr.validate()?;
        self.densify.validate()
    }
}

/// One loss-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct BackgroundResult {
    pub cloud: GaussianCloud,
    pub log: Vec<LogEntry>,
    pub classes: ClassAssignment,
    pub sky_points: usize,
}

fn training_frames(bundle: &SceneBundle) -> Result<Vec<&Frame>> {
    let frames: Vec<&Frame> = bundle.frames_in(Split::Train).into_iter().map(|i| &bundle.frames[i]).collect();
    if frames.is_empty() {
        return Err(CoreError::Config("scene has no training frames".into()));
    }
    for f in &frames {
        let m = &f.mask;
        if m.width != f.image.width || m.height != f.image.height || m.labels.len() != m.width * m.height {
            return Err(CoreError::Config(format!("frame {} has no usable semantic mask", f.camera.frame_index)));
        }
    }
    Ok(frames)
}

/// Initial background cloud: bundle points classified by vote, plus the sky plane.
pub fn initial_background(bundle: &SceneBundle, cfg: &BackgroundConfig) -> Result<BackgroundResult> {
    let frames = training_frames(bundle)?;
    let mut points: Vec<Vector3<f64>> =
        bundle.points.positions.iter().map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect();
    let views: Vec<(&CameraView, &SemanticMask)> = frames.iter().map(|f| (&f.camera, &f.mask)).collect();
    let mut classes = assign_classes(&points, &views);
    if classes.unobserved > 0 {
        info!("{} of {} points are not seen by any training view", classes.unobserved, points.len());
    }
    let (lo, hi) = bundle.bounds();
    let z = sky_height(&hi, &cfg.sky);
    let extent = sky_extent(&lo, &hi, &cfg.sky);
    let mut sky = sky_grid(&extent, z, cfg.sky.density);
    if cfg.sky.cover_views {
        if let Some(fp) = sky_footprint(&frames, z, cfg.sky.max_distance) {
            sky.extend(sky_outer_ring(&extent, &fp, z, &cfg.sky));
        }
    }
    let sky_points = sky.len();
    points.extend(sky);
    classes.classes.extend(std::iter::repeat_n(ClassTag::Sky, sky_points));
    let colors = nearest_frame_colors(&points, &classes.classes, &frames);
    let cloud = cloud_from_points(&points, &colors, &classes.classes, cfg.sh_degree);
    info!(
        "background init: {} Gaussians ({} road, {} sky incl. {sky_points} plane points)",
        cloud.len(),
        cloud.class.iter().filter(|c| **c == ClassTag::Road).count(),
        cloud.class.iter().filter(|c| **c == ClassTag::Sky).count()
    );
    Ok(BackgroundResult { cloud, log: Vec::new(), classes, sky_points })
}

fn region_label(class: ClassTag) -> u8 {
    match class {
        ClassTag::Road => LABEL_ROAD,
        ClassTag::Sky => LABEL_SKY,
        _ => LABEL_OTHER,
    }
}

fn region_name(class: ClassTag) -> &'static str {
    match class {
        ClassTag::Road => "road",
        ClassTag::Sky => "sky",
        _ => "other",
    }
}

/// Renders the Gaussians `idx` alone and adds the gradient of the
/// (1−λ)·L1 + λ·D-SSIM loss on `mask` into `grads`; returns (loss, l1).
fn supervise_subset(
    cloud: &GaussianCloud,
    idx: &[usize],
    frame: &Frame,
    mask: &[bool],
    lambda: f64,
    region: &str,
    grads: &mut CloudGrads,
    stats: &mut DensifyStats,
) -> Result<(f64, f64)> {
    let sub = cloud.select(idx);
    let scene = RenderScene::from_cloud(&sub);
    let out = render(&scene, &frame.camera);
    let loss = photometric_loss(&frame.image, &out.image, mask, lambda, region)?;
    let g = render_backward(&scene, &frame.camera, &out, &loss.grad);
    let mut sg = CloudGrads::zeros(&sub);
    accumulate_cloud_grads(&sub, &g, 0..sub.len(), None, &mut sg);
    let sw = cloud.sh_width();
    for (j, &i) in idx.iter().enumerate() {
        for k in 0..3 {
            grads.mu[i][k] += sg.mu[j][k];
            grads.log_scale[i][k] += sg.log_scale[j][k];
        }
        for k in 0..4 {
            grads.rot[i][k] += sg.rot[j][k];
        }
        grads.opacity_logit[i] += sg.opacity_logit[j];
        for k in 0..sw {
            grads.sh[i * sw + k] += sg.sh[j * sw + k];
        }
    }
    stats.record(out.visible_sources().map(|j| (idx[j], sg.screen[j])));
    Ok((loss.value, loss.l1))
}

/// Two-phase constrained background training. Phase 1 renders Road, Sky and
/// Other Gaussians in isolation against their own region masks; phase 2
/// renders them together against every non-object pixel. Road and Sky
/// positions never change.
pub fn train_background(bundle: &SceneBundle, cfg: &BackgroundConfig, settings: &TrainSettings, seed: u64) -> Result<BackgroundResult> {
    settings.validate()?;
    let init = initial_background(bundle, cfg)?;
    train_background_from(bundle, init, cfg, settings, seed)
}

/// Mean |roll| + |pitch| (radians) and mean normal-axis scale s_z (meters)
/// over the road Gaussians; zeros when there are none.
pub fn road_flatness(cloud: &GaussianCloud) -> (f64, f64) {
    let road = cloud.indices_where(|c| c == ClassTag::Road);
    if road.is_empty() {
        return (0.0, 0.0);
    }
    let (mut tilt, mut sz) = (0.0, 0.0);
    for &i in &road {
        let (roll, pitch) = extract_roll_pitch(&cloud.rot[i]);
        tilt += roll.abs() + pitch.abs();
        sz += cloud.log_scale[i][2].exp();
    }
    (tilt / road.len() as f64, sz / road.len() as f64)
}

/// Trains an already initialized background (see [`initial_background`]).
pub fn train_background_from(
    bundle: &SceneBundle,
    mut state: BackgroundResult,
    cfg: &BackgroundConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<BackgroundResult> {
    let frames = training_frames(bundle)?;
    let w = &settings.weights;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = &mut state.cloud;
    let max_count = (settings.densify.max_growth * cloud.len() as f64) as usize;
    let mut opt = CloudOptimizer::new(cloud);
    let total = cfg.phase1_iters + cfg.phase2_iters;
    let mut stats = DensifyStats::new(cloud.len());
    let classes = [ClassTag::Road, ClassTag::Sky, ClassTag::Other];
    let mut region_idx: Vec<Vec<usize>> = classes.iter().map(|&c| cloud.indices_where(|k| k == c)).collect();
    let all_idx: Vec<usize> = (0..cloud.len()).collect();
    let mut all_idx = all_idx;

    for iter in 0..total {
        let phase = if iter < cfg.phase1_iters { 1 } else { 2 };
        if iter == cfg.phase1_iters && iter > 0 {
            stats = DensifyStats::new(cloud.len());
        }
        let frame = frames[rng.random_range(0..frames.len())];
        let mut grads = CloudGrads::zeros(cloud);
        let mut photo = 0.0;
        let mut l1 = 0.0;
        let constraint;
        if phase == 1 {
            for (c, &class) in classes.iter().enumerate() {
                let mask = frame.mask.region_pixels(region_label(class));
                if region_idx[c].is_empty() || !mask.iter().any(|&m| m) {
                    continue;
                }
                let (v, l) = supervise_subset(cloud, &region_idx[c], frame, &mask, w.lambda, region_name(class), &mut grads, &mut stats)?;
                photo += v;
                l1 += l;
            }
            let road = flatness_penalty(cloud, &region_idx[0], w.beta, Some(&mut grads));
            let sky = flatness_penalty(cloud, &region_idx[1], w.beta, Some(&mut grads));
            constraint = road + sky;
            state.log.push(LogEntry { iter, term: "flatness_road".into(), value: road });
        } else {
            let mask = frame.mask.background_pixels();
            let (v, l) = supervise_subset(cloud, &all_idx, frame, &mask, w.lambda, "background", &mut grads, &mut stats)?;
            photo = v;
            l1 = l;
            let mut flat: Vec<usize> = region_idx[0].clone();
            flat.extend(&region_idx[1]);
            flat.sort_unstable();
            constraint = flatness_penalty(cloud, &flat, w.beta, Some(&mut grads));
            state.log.push(LogEntry {
                iter,
                term: "flatness_road".into(),
                value: flatness_penalty(cloud, &region_idx[0], 0.0, None),
            });
        }
        let value = photo + w.beta * constraint;
        state.log.push(LogEntry { iter, term: format!("phase{phase}_l1"), value: l1 });
        state.log.push(LogEntry { iter, term: format!("phase{phase}_loss"), value });
        if iter % 50 == 0 {
            info!("background iter {iter}/{total} phase {phase}: loss {value:.5} l1 {l1:.5} n {}", cloud.len());
        }
        opt.step(cloud, &grads, &settings.lr, settings.lr.mu_at(iter, total));

        let stage_iter = if phase == 1 { iter } else { iter - cfg.phase1_iters };
        let stage_total = if phase == 1 { cfg.phase1_iters } else { cfg.phase2_iters };
        if settings.densify.due(stage_iter, stage_total) {
            let r = densify_and_prune(cloud, &stats, &settings.densify, max_count, &mut rng);
            opt.remap(&r.lineage, cloud.sh_width());
            info!("densify at {iter}: +{} clones, {} splits, -{} pruned -> {}", r.cloned, r.split, r.pruned, cloud.len());
            stats = DensifyStats::new(cloud.len());
            region_idx = classes.iter().map(|&c| cloud.indices_where(|k| k == c)).collect();
            all_idx = (0..cloud.len()).collect();
        }
        if iter + 1 == cfg.phase1_iters {
            let (tilt, sz) = road_flatness(cloud);
            info!("after phase 1: road mean |roll|+|pitch| {tilt:.4} rad, mean s_z {sz:.4} m");
            state.log.push(LogEntry { iter, term: "phase1_road_tilt".into(), value: tilt });
            state.log.push(LogEntry { iter, term: "phase1_road_sz".into(), value: sz });
        }
    }
    if cloud.validate().is_err() {
        warn!("background cloud failed validation after training");
    }
    cloud.validate()?;
    Ok(state)
}
