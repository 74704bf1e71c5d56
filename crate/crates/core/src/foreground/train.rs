//! Per-object foreground training with reflected-Gaussian supervision.

use autosplat_scene::{ColorImage, SceneBundle, Split};
use log::{info, warn};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::appearance::{AppearanceModel, EMBED_DIM};
use super::reflect::Reflection;
use super::template::{instantiate_template, TemplateModel};
use crate::background::{LogEntry, TrainSettings};
use crate::gaussian::{split_rigid, CloudGrads, GaussianCloud};
use crate::loss::photometric_loss;
use crate::optim::{densify_and_prune, AdamState, CloudOptimizer, DensifyStats};
use crate::raster::{accumulate_cloud_grads, render, render_backward, RenderScene};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForegroundConfig {
    pub iters: usize,
    /// Supervise the mirrored cloud on every odd iteration.
    pub reflection: bool,
    /// Learn time-dependent residual SH.
    pub appearance: bool,
    pub template_points: usize,
    /// Pixels added around the instance box when cropping training views.
    pub crop_margin: u32,
    /// Frames where fewer instance pixels are visible are not used.
    pub min_pixels: usize,
    pub densify: bool,
    pub sh_degree: usize,
    /// Sine/cosine octaves of the position input of the appearance MLP.
    pub position_octaves: usize,
}

impl Default for ForegroundConfig {
    fn default() -> Self {
        ForegroundConfig {
            iters: 5000,
            reflection: true,
            appearance: true,
            template_points: 2000,
            crop_margin: 8,
            min_pixels: 16,
            densify: true,
            sh_degree: 2,
            position_octaves: super::appearance::POSITION_OCTAVES,
        }
    }
}

/// A rigid foreground object: its Gaussians in the object frame, the normal
/// of its symmetry plane and its optional appearance model.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundObject {
    pub id: u16,
    pub cloud: GaussianCloud,
    pub symmetry_axis: Vector3<f64>,
    pub appearance: Option<AppearanceModel>,
}

impl ForegroundObject {
    /// SH coefficients at frame `t`: f_SH + Δf_SH,t. The flag reports a
    /// frame outside the embedding table (clamped).
    pub fn sh_at(&self, t: usize) -> (Vec<f64>, bool) {
        match &self.appearance {
            Some(app) => {
                let (e, clamped) = app.embedding_at(t);
                (add(&self.cloud.sh, &app.residuals(&e, &self.cloud)), clamped)
            }
            None => (self.cloud.sh.clone(), false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForegroundResult {
    pub objects: Vec<ForegroundObject>,
    pub log: Vec<LogEntry>,
    /// Objects that no training frame shows.
    pub skipped: Vec<u16>,
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Instantiates `template` for every tracked object.
pub fn init_objects(bundle: &SceneBundle, template: &TemplateModel, cfg: &ForegroundConfig, seed: u64) -> Result<Vec<ForegroundObject>> {
    let sw = 3 * crate::sh::coeff_count(cfg.sh_degree);
    bundle
        .tracks
        .iter()
        .map(|track| {
            let cloud = instantiate_template(template, track, cfg.sh_degree)?;
            let appearance = cfg
                .appearance
                .then(|| AppearanceModel::new(bundle.frames.len(), sw, cfg.position_octaves, seed ^ (u64::from(track.object_id) << 32)));
            Ok(ForegroundObject { id: track.object_id, cloud, symmetry_axis: track.symmetry_axis, appearance })
        })
        .collect()
}

/// One training view of an object: the crop around its instance mask, the
/// background Gaussians that can reach it, and the object pose.
struct ObjectView {
    frame: usize,
    camera: autosplat_scene::CameraView,
    gt: ColorImage,
    /// Crop pixels not covered by another object.
    mask: Vec<bool>,
    background: RenderScene,
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
}

fn object_views(bundle: &SceneBundle, background: &GaussianCloud, id: u16, cfg: &ForegroundConfig) -> Vec<ObjectView> {
    let Some(track) = bundle.track(id) else { return Vec::new() };
    bundle
        .frames_in(Split::Train)
        .into_iter()
        .filter_map(|fi| {
            let f = &bundle.frames[fi];
            let pose = track.pose(fi)?;
            let (w, h) = (f.mask.width, f.mask.height);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            let mut count = 0;
            for y in 0..h {
                for x in 0..w {
                    if f.mask.instance[y * w + x] == id {
                        count += 1;
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                    }
                }
            }
            if count < cfg.min_pixels.max(1) {
                return None;
            }
            let m = cfg.crop_margin as usize;
            let (x0, y0) = (x0.saturating_sub(m), y0.saturating_sub(m));
            let (x1, y1) = ((x1 + m).min(w - 1), (y1 + m).min(h - 1));
            let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
            let camera = f.camera.cropped(x0 as u32, y0 as u32, cw as u32, ch as u32);
            let gt = f.image.cropped(x0, y0, cw, ch);
            let mut mask = Vec::with_capacity(cw * ch);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let k = f.mask.instance[y * w + x];
                    mask.push(k == 0 || k == id);
                }
            }
            let full = RenderScene::from_cloud(background);
            let out = render(&full, &camera);
            let visible: Vec<usize> = out.visible_sources().collect();
            let mut sorted = visible;
            sorted.sort_unstable();
            let background = RenderScene::from_cloud(&background.select(&sorted));
            let (rot, trans) = split_rigid(pose);
            Some(ObjectView { frame: fi, camera, gt, mask, background, rot, trans })
        })
        .collect()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Trains one object against the frozen `background`. Returns `None` when
/// no training frame shows the object.
pub fn train_object(
    bundle: &SceneBundle,
    background: &GaussianCloud,
    mut object: ForegroundObject,
    cfg: &ForegroundConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<Option<(ForegroundObject, Vec<LogEntry>)>> {
    let views = object_views(bundle, background, object.id, cfg);
    if views.is_empty() {
        warn!("object {} is not visible in any training frame; skipped", object.id);
        return Ok(None);
    }
    let w = &settings.weights;
    let lr = &settings.lr;
    let refl = Reflection::new(&object.symmetry_axis, object.cloud.sh_degree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = CloudOptimizer::new(&object.cloud);
    let mut mlp_opt = object.appearance.as_ref().map(|a| AdamState::new(a.weights.len()));
    let mut emb_opt: Vec<AdamState> =
        object.appearance.as_ref().map_or(Vec::new(), |a| (0..a.frames).map(|_| AdamState::new(EMBED_DIM)).collect());
    let mut stats = DensifyStats::new(object.cloud.len());
    let max_count = (settings.densify.max_growth * object.cloud.len() as f64) as usize;
    let mut log = Vec::new();
    let tag = format!("object{}", object.id);
    let total = cfg.iters;
    for iter in 0..total {
        let v = &views[rng.random_range(0..views.len())];
        let reflected = cfg.reflection && iter % 2 == 1;
        let t = v.frame;
        let cloud = &object.cloud;

        let mut current = cloud.clone();
        let mut app_state = None;
        if let Some(app) = &object.appearance {
            let e = app.embedding(t)?;
            let res = app.residuals(&e, cloud);
            current.sh = add(&cloud.sh, &res);
            app_state = Some((e, res));
        }
        let rendered = if reflected { refl.reflect_cloud(&current) } else { current };
        let mut scene = v.background.clone();
        let range = scene.push_cloud(&rendered, Some((&v.rot, &v.trans)), None);
        let out = render(&scene, &v.camera);
        let loss = photometric_loss(&v.gt, &out.image, &v.mask, w.lambda, &tag)?;
        let sg = render_backward(&scene, &v.camera, &out, &loss.grad);
        let mut g = CloudGrads::zeros(&rendered);
        accumulate_cloud_grads(&rendered, &sg, range.clone(), Some(&v.rot), &mut g);
        if reflected {
            g = refl.pull_back(cloud, &g);
        }
        stats.record(out.visible_sources().filter(|s| range.contains(s)).map(|s| (s - range.start, g.screen[s - range.start])));

        let mut value = loss.value;
        if let (Some(app), Some((e, res))) = (object.appearance.as_mut(), app_state) {
            let n = res.len().max(1) as f64;
            value += w.gamma * res.iter().map(|r| r.abs()).sum::<f64>() / n;
            let d_res: Vec<f64> = g.sh.iter().zip(&res).map(|(d, r)| d + w.gamma * sign(*r) / n).collect();
            let ag = app.backward(&e, &object.cloud, &d_res);
            for (gm, am) in g.mu.iter_mut().zip(&ag.mu) {
                for k in 0..3 {
                    gm[k] += am[k];
                }
            }
            for (gs, a) in g.sh.iter_mut().zip(&ag.sh) {
                *gs += a;
            }
            if let Some(o) = mlp_opt.as_mut() {
                o.step(&mut app.weights, &ag.weights, lr.mlp);
            }
            emb_opt[t].step(&mut app.embeddings[t * EMBED_DIM..(t + 1) * EMBED_DIM], &ag.embedding, lr.embedding);
            app.trained[t] = true;
        }
        log.push(LogEntry { iter, term: format!("{tag}_l1"), value: loss.l1 });
        log.push(LogEntry { iter, term: format!("{tag}_loss"), value });
        if iter % 100 == 0 {
            info!("{tag} iter {iter}/{total}: loss {value:.5} l1 {:.5} n {}", loss.l1, object.cloud.len());
        }
        opt.step(&mut object.cloud, &g, lr, lr.mu_at(iter, total));

        if cfg.densify && settings.densify.due(iter, total) {
            let r = densify_and_prune(&mut object.cloud, &stats, &settings.densify, max_count, &mut rng);
            opt.remap(&r.lineage, object.cloud.sh_width());
            stats = DensifyStats::new(object.cloud.len());
            info!("{tag} densify at {iter}: +{} clones, {} splits, -{} pruned -> {}", r.cloned, r.split, r.pruned, object.cloud.len());
        }
    }
    object.cloud.validate()?;
    Ok(Some((object, log)))
}

/// Trains every object independently (in parallel) against the frozen
/// background. Objects no training frame shows are returned untrained and
/// listed in `skipped`.
pub fn train_foreground(
    bundle: &SceneBundle,
    background: &GaussianCloud,
    objects: Vec<ForegroundObject>,
    cfg: &ForegroundConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<ForegroundResult> {
    settings.validate()?;
    for o in &objects {
        if o.cloud.sh_degree != background.sh_degree {
            return Err(CoreError::Config(format!(
                "object {} has SH degree {} but the background has {}",
                o.id, o.cloud.sh_degree, background.sh_degree
            )));
        }
    }
    let results: Vec<Result<(ForegroundObject, Option<Vec<LogEntry>>)>> = objects
        .into_par_iter()
        .map(|o| {
            let fallback = o.clone();
            let s = seed ^ (u64::from(o.id).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            Ok(match train_object(bundle, background, o, cfg, settings, s)? {
                Some((trained, log)) => (trained, Some(log)),
                None => (fallback, None),
            })
        })
        .collect();
    let mut out = ForegroundResult { objects: Vec::new(), log: Vec::new(), skipped: Vec::new() };
    for r in results {
        let (o, log) = r?;
        match log {
            Some(l) => out.log.extend(l),
            None => out.skipped.push(o.id),
        }
        out.objects.push(o);
    }
    Ok(out)
}
