//! Scenario engine: composing the fused scene at a frame under a list of
//! edits, and rendering edited sequences.

use std::collections::BTreeMap;

use autosplat_scene::camera::{check_rigid, rotation_z, rows_to_mat4};
use autosplat_scene::{CameraView, ColorImage, SceneBundle};
use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fusion::FusedScene;
use crate::gaussian::split_rigid;
use crate::loss::{psnr, ssim};
use crate::raster::{render, RenderScene};
use crate::{CoreError, Result};

/// One scenario modification. Edits apply left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ScenarioEdit {
    /// Moves the ego camera along its own right axis.
    EgoLateralShift { meters: f64 },
    /// Replaces the ego camera pose (rows of the camera-to-world matrix).
    EgoPoseOverride { cam_to_world: [[f64; 4]; 4] },
    /// Translates an object in the world and turns it about its vertical
    /// axis through its center. `frames` restricts the edit to those frames.
    ObjectOffset {
        object_id: u16,
        #[serde(default)]
        translation: [f64; 3],
        #[serde(default)]
        yaw: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frames: Option<Vec<usize>>,
    },
    ObjectRemove { object_id: u16 },
    /// Adds a copy of an object following its own trajectory; frame `t` uses
    /// `poses[min(t, len - 1)]` (object-to-world rows).
    ObjectClone { object_id: u16, new_id: u16, poses: Vec<[[f64; 4]; 4]> },
    /// Renders another frame of the timeline.
    TimeOverride { t: usize },
}

/// Where one object ended up in a composed scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    /// Object id in the scenario (clones carry their new id).
    pub id: u16,
    /// Index into `FusedScene::objects` of the source object.
    pub index: usize,
    pub range: std::ops::Range<usize>,
    /// Object-to-world rotation and translation used for rendering.
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    /// Rotation of the track pose alone (before correction and edits).
    pub track_rot: Matrix3<f64>,
    /// SH frame index of the object in the render scene.
    pub frame: usize,
    /// The appearance embedding was clamped to the table.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct ComposedScene {
    pub scene: RenderScene,
    pub camera: CameraView,
    pub t: usize,
    pub objects: Vec<PlacedObject>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Offset {
    translation: Vector3<f64>,
    yaw: f64,
}

enum Trajectory {
    Track(u16),
    Poses(Vec<Matrix4<f64>>),
}

struct Instance {
    id: u16,
    index: usize,
    trajectory: Trajectory,
    offset: Offset,
}

fn invalid(msg: String) -> CoreError {
    CoreError::InvalidParameter(msg)
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Checks every edit against the scene without rendering.
pub fn validate_edits(fused: &FusedScene, edits: &[ScenarioEdit]) -> Result<()> {
    let mut ids: Vec<u16> = fused.object_ids();
    let known = |ids: &Vec<u16>, id: u16| -> Result<()> {
        if ids.contains(&id) {
            Ok(())
        } else {
            Err(CoreError::UnknownObject { id, valid: ids.clone() })
        }
    };
    for (i, e) in edits.iter().enumerate() {
        match e {
            ScenarioEdit::EgoLateralShift { meters } => {
                if !meters.is_finite() {
                    return Err(invalid(format!("edits[{i}].meters must be finite")));
                }
            }
            ScenarioEdit::EgoPoseOverride { cam_to_world } => {
                check_rigid(&rows_to_mat4(cam_to_world)).map_err(|m| invalid(format!("edits[{i}].cam_to_world: {m}")))?;
            }
            ScenarioEdit::ObjectOffset { object_id, translation, yaw, frames } => {
                known(&ids, *object_id)?;
                if !finite(translation) || !yaw.is_finite() {
                    return Err(invalid(format!("edits[{i}] offset must be finite")));
                }
                if let Some(f) = frames.as_ref().and_then(|f| f.iter().find(|&&f| f >= fused.frame_count())) {
                    return Err(invalid(format!("edits[{i}].frames: frame {f} outside 0..{}", fused.frame_count())));
                }
            }
            ScenarioEdit::ObjectRemove { object_id } => known(&ids, *object_id)?,
            ScenarioEdit::ObjectClone { object_id, new_id, poses } => {
                known(&ids, *object_id)?;
                if ids.contains(new_id) || *new_id == 0 {
                    return Err(invalid(format!("edits[{i}].new_id {new_id} is already in use or zero")));
                }
                if poses.is_empty() {
                    return Err(invalid(format!("edits[{i}].poses is empty")));
                }
                for (j, p) in poses.iter().enumerate() {
                    check_rigid(&rows_to_mat4(p)).map_err(|m| invalid(format!("edits[{i}].poses[{j}]: {m}")))?;
                }
                ids.push(*new_id);
            }
            ScenarioEdit::TimeOverride { t } => {
                if *t >= fused.frame_count() {
                    return Err(CoreError::FrameOutOfRange { frame: *t, count: fused.frame_count() });
                }
            }
        }
    }
    Ok(())
}

/// Fused scene at frame `t` under `edits`: background plus every visible
/// object posed by track ∘ correction ∘ edit offsets, with foreground SH
/// taken at `t`, and the ego camera after ego edits.
pub fn compose(fused: &FusedScene, t: usize, edits: &[ScenarioEdit]) -> Result<ComposedScene> {
    validate_edits(fused, edits)?;
    let t = edits
        .iter()
        .rev()
        .find_map(|e| match e {
            ScenarioEdit::TimeOverride { t } => Some(*t),
            _ => None,
        })
        .unwrap_or(t);
    if t >= fused.frame_count() {
        return Err(CoreError::FrameOutOfRange { frame: t, count: fused.frame_count() });
    }
    let mut camera = fused.cameras[t].clone();
    let mut instances: Vec<Instance> = fused
        .objects
        .iter()
        .enumerate()
        .map(|(index, o)| Instance { id: o.id, index, trajectory: Trajectory::Track(o.id), offset: Offset::default() })
        .collect();
    for e in edits {
        match e {
            ScenarioEdit::EgoLateralShift { meters } => camera = camera.shifted_right(*meters),
            ScenarioEdit::EgoPoseOverride { cam_to_world } => camera.cam_to_world = rows_to_mat4(cam_to_world),
            ScenarioEdit::ObjectOffset { object_id, translation, yaw, frames } => {
                if frames.as_ref().is_some_and(|f| !f.contains(&t)) {
                    continue;
                }
                if let Some(inst) = instances.iter_mut().find(|i| i.id == *object_id) {
                    inst.offset.translation += Vector3::from(*translation);
                    inst.offset.yaw += yaw;
                }
            }
            ScenarioEdit::ObjectRemove { object_id } => instances.retain(|i| i.id != *object_id),
            ScenarioEdit::ObjectClone { object_id, new_id, poses } => {
                // a removed source leaves nothing to copy
                if let Some(src) = instances.iter().find(|i| i.id == *object_id) {
                    let index = src.index;
                    instances.push(Instance {
                        id: *new_id,
                        index,
                        trajectory: Trajectory::Poses(poses.iter().map(rows_to_mat4).collect()),
                        offset: Offset::default(),
                    });
                }
            }
            ScenarioEdit::TimeOverride { .. } => {}
        }
    }

    let mut scene = RenderScene::from_cloud(&fused.background);
    let mut placed = Vec::new();
    for inst in &instances {
        let pose = match &inst.trajectory {
            Trajectory::Track(id) => match fused.track(*id).and_then(|tr| tr.pose(t)) {
                Some(p) => *p,
                None => continue,
            },
            Trajectory::Poses(p) => p[t.min(p.len() - 1)],
        };
        let (track_rot, track_trans) = split_rigid(&pose);
        let c = &fused.corrections[inst.index];
        let rot = rotation_z(inst.offset.yaw) * track_rot * c.rotation_matrix();
        let trans = track_rot * c.translation_vector() + track_trans + inst.offset.translation;
        let object = &fused.objects[inst.index];
        let (sh, clamped) = object.sh_at(t);
        let range = scene.push_cloud(&object.cloud, Some((&rot, &trans)), Some(&sh));
        placed.push(PlacedObject { id: inst.id, index: inst.index, range, rot, trans, track_rot, frame: scene.frames.len() - 1, clamped });
    }
    Ok(ComposedScene { scene, camera, t, objects: placed })
}

/// Renders frame `t` under `edits`, optionally from another camera and at
/// another resolution.
pub fn render_frame(
    fused: &FusedScene,
    t: usize,
    edits: &[ScenarioEdit],
    camera: Option<&CameraView>,
    size: Option<(u32, u32)>,
) -> Result<ColorImage> {
    let composed = compose(fused, t, edits)?;
    let mut cam = camera.cloned().unwrap_or(composed.camera);
    if let Some((w, h)) = size {
        if w == 0 || h == 0 {
            return Err(invalid(format!("render size {w}x{h} must be positive")));
        }
        cam = cam.resized(w, h);
    }
    Ok(render(&composed.scene, &cam).image)
}

/// One frame of a simulated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRequest {
    pub t: usize,
    #[serde(default)]
    pub edits: Vec<ScenarioEdit>,
}

#[derive(Debug, Clone)]
pub struct SimFrame {
    pub t: usize,
    pub image: ColorImage,
    /// Against the recorded frame, when the request leaves the view unedited.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Renders every request (in parallel). Requests without edits are scored
/// against `ground_truth` when it is given.
pub fn simulate(fused: &FusedScene, requests: &[SimRequest], ground_truth: Option<&SceneBundle>) -> Result<Vec<SimFrame>> {
    requests
        .par_iter()
        .map(|r| {
            let image = render_frame(fused, r.t, &r.edits, None, None)?;
            let (mut p, mut s) = (None, None);
            if let Some(gt) = ground_truth.filter(|_| r.edits.is_empty()).and_then(|b| b.frames.get(r.t)) {
                if gt.image.same_shape(&image) {
                    p = Some(psnr(&gt.image, &image, None)?);
                    s = Some(ssim(&gt.image, &image, None)?);
                }
            }
            Ok(SimFrame { t: r.t, image, psnr: p, ssim: s })
        })
        .collect()
}

/// Summary statistics of scored frames.
pub fn mean_metrics(frames: &[SimFrame]) -> BTreeMap<&'static str, f64> {
    let mut out = BTreeMap::new();
    let ps: Vec<f64> = frames.iter().filter_map(|f| f.psnr).collect();
    let ss: Vec<f64> = frames.iter().filter_map(|f| f.ssim).collect();
    if !ps.is_empty() {
        out.insert("psnr", ps.iter().sum::<f64>() / ps.len() as f64);
    }
    if !ss.is_empty() {
        out.insert("ssim", ss.iter().sum::<f64>() / ss.len() as f64);
    }
    out
}
