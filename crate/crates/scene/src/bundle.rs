//! Scene bundle: a directory holding `manifest.json`, per-frame PNG images and
//! masks, a point container and per-object tracks.
//!
//! Loading validates the whole manifest (structure, rigid transforms, file
//! presence) before any image is decoded.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{check_rigid, mat4_to_rows, rows_to_mat4, CameraView, Intrinsics};
use crate::image::{ColorImage, SemanticMask};
use crate::points::PointSet;
use crate::SceneError;

pub const MANIFEST_FORMAT: &str = "autosplat-scene";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub frames: Vec<FrameEntry>,
    pub points: String,
    pub tracks: Vec<TrackEntry>,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub index: usize,
    pub image: String,
    pub labels: String,
    pub instances: String,
    pub timestamp: f64,
    pub split: Split,
    pub width: u32,
    pub height: u32,
    pub intrinsics: Intrinsics,
    pub cam_to_world: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackEntry {
    pub object_id: u16,
    pub bbox_dims: [f64; 3],
    pub symmetry_axis: [f64; 3],
    pub poses: Vec<PoseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    pub frame: usize,
    pub object_to_world: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub up_axis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

/// Rigid object trajectory with its 3D box size and bilateral symmetry axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub object_id: u16,
    /// Object-to-world pose per frame, `None` where the object is not annotated.
    pub poses: Vec<Option<Matrix4<f64>>>,
    /// (length, width, height) in meters.
    pub bbox_dims: Vector3<f64>,
    /// Unit normal of the symmetry plane in the object frame.
    pub symmetry_axis: Vector3<f64>,
}

impl ObjectTrack {
    pub fn pose(&self, frame: usize) -> Option<&Matrix4<f64>> {
        self.poses.get(frame).and_then(|p| p.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub camera: CameraView,
    pub image: ColorImage,
    pub mask: SemanticMask,
    pub timestamp: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub frames: Vec<Frame>,
    pub points: PointSet,
    pub tracks: Vec<ObjectTrack>,
    pub metadata: Metadata,
}

impl SceneBundle {
    pub fn track(&self, object_id: u16) -> Option<&ObjectTrack> {
        self.tracks.iter().find(|t| t.object_id == object_id)
    }

    pub fn object_ids(&self) -> Vec<u16> {
        self.tracks.iter().map(|t| t.object_id).collect()
    }

    pub fn frames_in(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.frames[i].split == split)
            .collect()
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (
            Vector3::from(self.metadata.bounds_min),
            Vector3::from(self.metadata.bounds_max),
        )
    }

    pub fn manifest(&self) -> Manifest {
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| FrameEntry {
                index: i,
                image: format!("images/{i:06}.png"),
                labels: format!("masks/labels_{i:06}.png"),
                instances: format!("masks/instances_{i:06}.png"),
                timestamp: f.timestamp,
                split: f.split,
                width: f.camera.width,
                height: f.camera.height,
                intrinsics: f.camera.intrinsics,
                cam_to_world: mat4_to_rows(&f.camera.cam_to_world),
            })
            .collect();
        let tracks = self
            .tracks
            .iter()
            .map(|t| TrackEntry {
                object_id: t.object_id,
                bbox_dims: t.bbox_dims.into(),
                symmetry_axis: t.symmetry_axis.into(),
                poses: t
                    .poses
                    .iter()
                    .enumerate()
                    .filter_map(|(f, p)| {
                        p.map(|m| PoseEntry {
                            frame: f,
                            object_to_world: mat4_to_rows(&m),
                        })
                    })
                    .collect(),
            })
            .collect();
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            frames,
            points: "points.bin".into(),
            tracks,
            metadata: self.metadata.clone(),
        }
    }
}

pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<(), SceneError> {
    let manifest = bundle.manifest();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| SceneError::io(&p, e))?;
    }
    for (f, entry) in bundle.frames.iter().zip(&manifest.frames) {
        f.image.save_png(&dir.join(&entry.image))?;
        f.mask
            .save(&dir.join(&entry.labels), &dir.join(&entry.instances))?;
    }
    bundle.points.save(&dir.join(&manifest.points))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let p = dir.join("manifest.json");
    std::fs::write(&p, json).map_err(|e| SceneError::io(&p, e))
}

/// Parses and validates `manifest.json` without touching any referenced payload.
pub fn read_manifest(dir: &Path) -> Result<Manifest, SceneError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| SceneError::io(&path, e))?;
    parse_json(&text, &path)
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(
    text: &str,
    file: &Path,
) -> Result<T, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        SceneError::Json {
            file: file.to_path_buf(),
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })
}

pub fn validate_manifest(m: &Manifest, dir: &Path) -> Result<(), SceneError> {
    if m.format != MANIFEST_FORMAT {
        return Err(SceneError::validation(
            "format",
            format!("expected \"{MANIFEST_FORMAT}\", found \"{}\"", m.format),
        ));
    }
    if m.version != MANIFEST_VERSION {
        return Err(SceneError::UnsupportedVersion {
            what: "scene manifest",
            found: m.version,
            supported: MANIFEST_VERSION,
        });
    }
    if m.frames.len() < 2 {
        return Err(SceneError::validation(
            "frames",
            format!("at least 2 frames required, found {}", m.frames.len()),
        ));
    }
    let require_file = |field: String, rel: &str| -> Result<PathBuf, SceneError> {
        let p = dir.join(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(SceneError::validation(
                field,
                format!("referenced file {} does not exist", p.display()),
            ))
        }
    };
    for (i, f) in m.frames.iter().enumerate() {
        let field = format!("frames[{i}]");
        if f.index != i {
            return Err(SceneError::validation(
                format!("{field}.index"),
                format!(
                    "frames must be listed in order; expected index {i}, found {}",
                    f.index
                ),
            ));
        }
        if !f.timestamp.is_finite() {
            return Err(SceneError::validation(
                format!("{field}.timestamp"),
                "timestamp must be finite",
            ));
        }
        camera_from_entry(f, i)?;
        require_file(format!("{field}.image"), &f.image)?;
        require_file(format!("{field}.labels"), &f.labels)?;
        require_file(format!("{field}.instances"), &f.instances)?;
    }
    require_file("points".into(), &m.points)?;
    let mut seen = HashSet::new();
    for (i, t) in m.tracks.iter().enumerate() {
        let field = format!("tracks[{i}]");
        if t.object_id == 0 || !seen.insert(t.object_id) {
            return Err(SceneError::validation(
                format!("{field}.object_id"),
                format!(
                    "object ids must be unique and non-zero, found {}",
                    t.object_id
                ),
            ));
        }
        if t.bbox_dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(SceneError::validation(
                format!("{field}.bbox_dims"),
                format!("box dimensions must be positive, found {:?}", t.bbox_dims),
            ));
        }
        if Vector3::from(t.symmetry_axis).norm() < 1e-9 {
            return Err(SceneError::validation(
                format!("{field}.symmetry_axis"),
                "symmetry axis must be non-zero",
            ));
        }
        for (j, p) in t.poses.iter().enumerate() {
            if p.frame >= m.frames.len() {
                return Err(SceneError::validation(
                    format!("{field}.poses[{j}].frame"),
                    format!("frame {} out of range 0..{}", p.frame, m.frames.len()),
                ));
            }
            check_rigid(&rows_to_mat4(&p.object_to_world)).map_err(|msg| {
                SceneError::validation(format!("{field}.poses[{j}].object_to_world"), msg)
            })?;
        }
    }
    let md = &m.metadata;
    if md.up_axis != "+Z" {
        return Err(SceneError::validation(
            "metadata.up_axis",
            format!("only \"+Z\" is supported, found \"{}\"", md.up_axis),
        ));
    }
    for k in 0..3 {
        if !(md.bounds_min[k].is_finite()
            && md.bounds_max[k].is_finite()
            && md.bounds_min[k] <= md.bounds_max[k])
        {
            return Err(SceneError::validation(
                "metadata.bounds_min",
                "bounds must be finite with min <= max",
            ));
        }
    }
    Ok(())
}

fn camera_from_entry(f: &FrameEntry, i: usize) -> Result<CameraView, SceneError> {
    let cam = CameraView {
        intrinsics: f.intrinsics,
        cam_to_world: rows_to_mat4(&f.cam_to_world),
        width: f.width,
        height: f.height,
        frame_index: i,
    };
    cam.validate(&format!("frames[{i}]"))?;
    Ok(cam)
}

pub fn load_scene(dir: &Path) -> Result<SceneBundle, SceneError> {
    let m = read_manifest(dir)?;
    validate_manifest(&m, dir)?;
    let mut frames = Vec::with_capacity(m.frames.len());
    for (i, f) in m.frames.iter().enumerate() {
        let camera = camera_from_entry(f, i)?;
        let image = ColorImage::load_png(&dir.join(&f.image))?;
        let mask = SemanticMask::load(&dir.join(&f.labels), &dir.join(&f.instances))?;
        let dims = (f.width as usize, f.height as usize);
        if (image.width, image.height) != dims || (mask.width, mask.height) != dims {
            return Err(SceneError::validation(
                format!("frames[{i}]"),
                format!(
                    "image {}x{} / mask {}x{} do not match declared {}x{}",
                    image.width, image.height, mask.width, mask.height, dims.0, dims.1
                ),
            ));
        }
        frames.push(Frame {
            camera,
            image,
            mask,
            timestamp: f.timestamp,
            split: f.split,
        });
    }
    let points = PointSet::load(&dir.join(&m.points))?;
    let tracks = m
        .tracks
        .iter()
        .map(|t| {
            let mut poses = vec![None; m.frames.len()];
            for p in &t.poses {
                poses[p.frame] = Some(rows_to_mat4(&p.object_to_world));
            }
            ObjectTrack {
                object_id: t.object_id,
                poses,
                bbox_dims: Vector3::from(t.bbox_dims),
                symmetry_axis: Vector3::from(t.symmetry_axis),
            }
        })
        .collect();
    Ok(SceneBundle {
        frames,
        points,
        tracks,
        metadata: m.metadata,
    })
}
