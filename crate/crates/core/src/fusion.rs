//! Scene fusion: per-object pose corrections and joint fine-tuning of the
//! foreground objects with the background opacities.

use autosplat_scene::{CameraView, ObjectTrack, SceneBundle, Split};
use log::info;
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::background::{LogEntry, TrainSettings};
use crate::foreground::appearance::EMBED_DIM;
use crate::foreground::ForegroundObject;
use crate::gaussian::{normalized, quat_to_matrix, CloudGrads, GaussianCloud};
use crate::loss::photometric_loss;
use crate::optim::{AdamState, CloudOptimizer, Group};
use crate::raster::{accumulate_cloud_grads, render, render_backward, SceneGrads};
use crate::scenario::{compose, PlacedObject};
use crate::{CoreError, Result};

/// Constant rigid correction applied in the object frame before the track
/// pose: `x ↦ R_t (R_c x + t_c) + t_t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseCorrection {
    pub translation: [f64; 3],
    /// Axis-angle, norm kept below π.
    pub rotation: [f64; 3],
}

/// Largest rotation angle a correction may reach.
pub const MAX_CORRECTION_ANGLE: f64 = std::f64::consts::PI - 1e-6;

impl PoseCorrection {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Rotation3::new(Vector3::from(self.rotation)).into_inner()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn clamp_rotation(&mut self) {
        let w = Vector3::from(self.rotation);
        let n = w.norm();
        if n > MAX_CORRECTION_ANGLE {
            let w = w * (MAX_CORRECTION_ANGLE / n);
            self.rotation = [w.x, w.y, w.z];
        }
    }
}

/// Right Jacobian of the rotation exponential at `w`.
pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = w.cross_matrix();
    if theta < 1e-6 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Gradient w.r.t. the axis-angle vector `w` of `R = exp([w]×)` given the
/// gradient `g` w.r.t. the matrix entries.
pub fn axis_angle_backward(w: &Vector3<f64>, g: &Matrix3<f64>) -> Vector3<f64> {
    let r = Rotation3::new(*w).into_inner();
    let a = r.transpose() * g;
    let v = Vector3::new(a[(2, 1)] - a[(1, 2)], a[(0, 2)] - a[(2, 0)], a[(1, 0)] - a[(0, 1)]);
    right_jacobian(w).transpose() * v
}

/// Gradients of a render loss w.r.t. the translation and axis-angle of the
/// correction of one placed object, whose world pose is
/// `(R_e R_t R_c, R_t t_c + t_t + d)` with edit yaw `R_e` and offset `d`.
pub fn correction_grads(placed: &PlacedObject, cloud: &GaussianCloud, sg: &SceneGrads, c: &PoseCorrection) -> (Vector3<f64>, Vector3<f64>) {
    // rotation seen by the correction: everything left of R_c
    let left = placed.rot * c.rotation_matrix().transpose();
    let rt = &placed.track_rot;
    let mut g_t = Vector3::zeros();
    let mut g_rc = Matrix3::zeros();
    for (i, si) in placed.range.clone().enumerate() {
        g_t += rt.transpose() * sg.mu[si];
        g_rc += left.transpose() * sg.mu[si] * Vector3::from(cloud.mu[i]).transpose();
        let rl = quat_to_matrix(&normalized(cloud.rot[i]));
        g_rc += left.transpose() * sg.rot[si] * rl.transpose();
    }
    g_rc += left.transpose() * sg.frames[placed.frame];
    (g_t, axis_angle_backward(&Vector3::from(c.rotation), &g_rc))
}

/// Background, foreground objects with their corrections, and the timeline
/// (object tracks and ego cameras) they are rendered against.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScene {
    pub background: GaussianCloud,
    pub objects: Vec<ForegroundObject>,
    /// One per entry of `objects`.
    pub corrections: Vec<PoseCorrection>,
    pub tracks: Vec<ObjectTrack>,
    /// Ego camera of every frame.
    pub cameras: Vec<CameraView>,
}

impl FusedScene {
    pub fn new(background: GaussianCloud, objects: Vec<ForegroundObject>, bundle: &SceneBundle) -> Result<FusedScene> {
        for o in &objects {
            if bundle.track(o.id).is_none() {
                return Err(CoreError::UnknownObject { id: o.id, valid: bundle.object_ids() });
            }
            if o.cloud.sh_degree != background.sh_degree {
                return Err(CoreError::Config(format!("object {} SH degree differs from the background", o.id)));
            }
        }
        let corrections = vec![PoseCorrection::default(); objects.len()];
        Ok(FusedScene {
            background,
            objects,
            corrections,
            tracks: bundle.tracks.clone(),
            cameras: bundle.frames.iter().map(|f| f.camera.clone()).collect(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn object_ids(&self) -> Vec<u16> {
        self.objects.iter().map(|o| o.id).collect()
    }

    pub fn track(&self, id: u16) -> Option<&ObjectTrack> {
        self.tracks.iter().find(|t| t.object_id == id)
    }

    pub fn object_index(&self, id: u16) -> Result<usize> {
        self.objects
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| CoreError::UnknownObject { id, valid: self.object_ids() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub iters: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { iters: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct FusionResult {
    pub fused: FusedScene,
    pub log: Vec<LogEntry>,
}

struct ObjectState {
    opt: CloudOptimizer,
    mlp: Option<AdamState>,
    embeddings: Vec<AdamState>,
    translation: AdamState,
    rotation: AdamState,
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

/// Joint fine-tuning on whole training images. Trains every foreground
/// attribute, the appearance models, the pose corrections and the
/// background opacities; everything else in the background is frozen and
/// no densification happens.
pub fn fuse_finetune(mut fused: FusedScene, bundle: &SceneBundle, cfg: &FusionConfig, settings: &TrainSettings, seed: u64) -> Result<FusionResult> {
    settings.validate()?;
    let frames = bundle.frames_in(Split::Train);
    if frames.is_empty() {
        return Err(CoreError::Config("scene has no training frames".into()));
    }
    if fused.cameras.len() != bundle.frames.len() {
        return Err(CoreError::Config(format!(
            "fused scene has {} frames but the bundle has {}",
            fused.cameras.len(),
            bundle.frames.len()
        )));
    }
    let w = &settings.weights;
    let lr = &settings.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bg_opt = CloudOptimizer::new(&fused.background);
    for g in [Group::Mu, Group::Rot, Group::LogScale, Group::Sh] {
        bg_opt.freeze(g);
    }
    let mut states: Vec<ObjectState> = fused
        .objects
        .iter()
        .map(|o| ObjectState {
            opt: CloudOptimizer::new(&o.cloud),
            mlp: o.appearance.as_ref().map(|a| AdamState::new(a.weights.len())),
            embeddings: o.appearance.as_ref().map_or(Vec::new(), |a| (0..a.frames).map(|_| AdamState::new(EMBED_DIM)).collect()),
            translation: AdamState::new(3),
            rotation: AdamState::new(3),
        })
        .collect();
    let mut log = Vec::new();
    let n_bg = fused.background.len();
    for iter in 0..cfg.iters {
        let t = frames[rng.random_range(0..frames.len())];
        let frame = &bundle.frames[t];
        let composed = compose(&fused, t, &[])?;
        let out = render(&composed.scene, &composed.camera);
        let mask = vec![true; out.image.pixel_count()];
        let loss = photometric_loss(&frame.image, &out.image, &mask, w.lambda, "image")?;
        let sg = render_backward(&composed.scene, &composed.camera, &out, &loss.grad);

        let mut bg_g = CloudGrads::zeros(&fused.background);
        accumulate_cloud_grads(&fused.background, &sg, 0..n_bg, None, &mut bg_g);
        bg_opt.step(&mut fused.background, &bg_g, lr, 0.0);

        let mut value = loss.value;
        for placed in &composed.objects {
            let k = placed.index;
            let st = &mut states[k];
            let obj = &mut fused.objects[k];
            let mut g = CloudGrads::zeros(&obj.cloud);
            accumulate_cloud_grads(&obj.cloud, &sg, placed.range.clone(), Some(&placed.rot), &mut g);

            let c = &mut fused.corrections[k];
            let (g_t, g_w) = correction_grads(placed, &obj.cloud, &sg, c);
            st.translation.step(&mut c.translation, &[g_t.x, g_t.y, g_t.z], lr.correction);
            st.rotation.step(&mut c.rotation, &[g_w.x, g_w.y, g_w.z], lr.correction);
            c.clamp_rotation();

            if let Some(app) = obj.appearance.as_mut() {
                let (e, _) = app.embedding_at(t);
                let res = app.residuals(&e, &obj.cloud);
                let n = res.len().max(1) as f64;
                value += w.gamma * res.iter().map(|r| r.abs()).sum::<f64>() / n;
                let d_res: Vec<f64> = g.sh.iter().zip(&res).map(|(d, r)| d + w.gamma * sign(*r) / n).collect();
                let ag = app.backward(&e, &obj.cloud, &d_res);
                for (gm, am) in g.mu.iter_mut().zip(&ag.mu) {
                    for j in 0..3 {
                        gm[j] += am[j];
                    }
                }
                for (gs, a) in g.sh.iter_mut().zip(&ag.sh) {
                    *gs += a;
                }
                if let Some(o) = st.mlp.as_mut() {
                    o.step(&mut app.weights, &ag.weights, lr.mlp);
                }
                if t < app.frames {
                    st.embeddings[t].step(&mut app.embeddings[t * EMBED_DIM..(t + 1) * EMBED_DIM], &ag.embedding, lr.embedding);
                    app.trained[t] = true;
                }
            }
            st.opt.step(&mut obj.cloud, &g, lr, lr.mu_at(iter, cfg.iters));
        }
        log.push(LogEntry { iter, term: "fusion_l1".into(), value: loss.l1 });
        log.push(LogEntry { iter, term: "fusion_loss".into(), value });
        if iter % 100 == 0 {
            info!("fusion iter {iter}/{}: loss {value:.5} l1 {:.5}", cfg.iters, loss.l1);
        }
    }
    Ok(FusionResult { fused, log })
}
