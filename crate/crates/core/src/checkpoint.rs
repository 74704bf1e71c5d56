//! Checkpoint file: trained clouds, appearance models and pose corrections.
//!
//! Layout (all integers little-endian):
//! - bytes 0..8: `ASPL1` followed by three zero bytes
//! - bytes 8..12: format version (u32)
//! - bytes 12..16: reserved, zero
//! - bytes 16..24: byte length of the table of contents (u64)
//! - bytes 24..: table of contents as UTF-8 JSON, zero-padded to 16 bytes
//! - blobs: little-endian f64 arrays, each starting on a 16-byte boundary
//!   at the absolute offset recorded in the table of contents.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::foreground::{AppearanceModel, ForegroundObject};
use crate::fusion::PoseCorrection;
use crate::gaussian::{ClassTag, GaussianCloud};
use crate::{CoreError, Result};

pub const MAGIC: &[u8; 5] = b"ASPL1";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;
const ALIGN: usize = 16;

/// Last pipeline stage whose output the checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Background,
    Foreground,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub background: GaussianCloud,
    pub objects: Vec<ForegroundObject>,
    /// One per object; all zero before fusion.
    pub corrections: Vec<PoseCorrection>,
    /// Configuration the stages ran with, echoed for provenance.
    pub config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Toc {
    stage: Stage,
    config: serde_json::Value,
    background: CloudToc,
    objects: Vec<ObjectToc>,
    blobs: BTreeMap<String, BlobToc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CloudToc {
    count: usize,
    sh_degree: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectToc {
    id: u16,
    symmetry_axis: [f64; 3],
    cloud: CloudToc,
    correction: PoseCorrection,
    appearance: Option<AppearanceToc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppearanceToc {
    frames: usize,
    sh_width: usize,
    pos_octaves: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobToc {
    offset: u64,
    /// Number of f64 values.
    len: u64,
}

fn cloud_blobs(prefix: &str, c: &GaussianCloud, out: &mut Vec<(String, Vec<f64>)>) {
    out.push((format!("{prefix}.mu"), c.mu.iter().flatten().copied().collect()));
    out.push((format!("{prefix}.rot"), c.rot.iter().flatten().copied().collect()));
    out.push((format!("{prefix}.log_scale"), c.log_scale.iter().flatten().copied().collect()));
    out.push((format!("{prefix}.opacity_logit"), c.opacity_logit.clone()));
    out.push((format!("{prefix}.sh"), c.sh.clone()));
    out.push((format!("{prefix}.class"), c.class.iter().map(|t| f64::from(t.code())).collect()));
}

fn object_prefix(id: u16) -> String {
    format!("object{id}")
}

fn pad(buf: &mut Vec<u8>) {
    while buf.len() % ALIGN != 0 {
        buf.push(0);
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    if ck.corrections.len() != ck.objects.len() {
        return Err(CoreError::InvalidSize(format!("{} corrections for {} objects", ck.corrections.len(), ck.objects.len())));
    }
    let mut blobs = Vec::new();
    cloud_blobs("background", &ck.background, &mut blobs);
    let mut objects = Vec::new();
    for (o, c) in ck.objects.iter().zip(&ck.corrections) {
        let p = object_prefix(o.id);
        cloud_blobs(&p, &o.cloud, &mut blobs);
        if let Some(a) = &o.appearance {
            a.validate()?;
            blobs.push((format!("{p}.embeddings"), a.embeddings.clone()));
            blobs.push((format!("{p}.weights"), a.weights.clone()));
            blobs.push((format!("{p}.trained"), a.trained.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()));
        }
        objects.push(ObjectToc {
            id: o.id,
            symmetry_axis: [o.symmetry_axis.x, o.symmetry_axis.y, o.symmetry_axis.z],
            cloud: CloudToc { count: o.cloud.len(), sh_degree: o.cloud.sh_degree },
            correction: *c,
            appearance: o.appearance.as_ref().map(|a| AppearanceToc { frames: a.frames, sh_width: a.sh_width, pos_octaves: a.pos_octaves }),
        });
    }

    // offsets depend on the TOC length, which depends on the offsets' digits:
    // iterate until the layout is stable
    let mut toc = Toc {
        stage: ck.stage,
        config: ck.config.clone(),
        background: CloudToc { count: ck.background.len(), sh_degree: ck.background.sh_degree },
        objects,
        blobs: BTreeMap::new(),
    };
    let mut toc_len = 0usize;
    let toc_bytes = loop {
        let mut offset = (HEADER + toc_len).next_multiple_of(ALIGN);
        toc.blobs.clear();
        for (name, data) in &blobs {
            toc.blobs.insert(name.clone(), BlobToc { offset: offset as u64, len: data.len() as u64 });
            offset = (offset + data.len() * 8).next_multiple_of(ALIGN);
        }
        let bytes = serde_json::to_vec(&toc).map_err(|e| CoreError::Config(format!("checkpoint table of contents: {e}")))?;
        if bytes.len() == toc_len {
            break bytes;
        }
        toc_len = bytes.len();
    };

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[0; 3]);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&(toc_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&toc_bytes);
    pad(&mut buf);
    for (name, data) in &blobs {
        debug_assert_eq!(buf.len() as u64, toc.blobs[name].offset);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        pad(&mut buf);
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    toc: &'a Toc,
    path: &'a str,
}

impl Reader<'_> {
    fn err(&self, message: String) -> CoreError {
        CoreError::Checkpoint { path: self.path.to_string(), message }
    }

    fn blob(&self, name: &str, expected: usize) -> Result<Vec<f64>> {
        let b = self.toc.blobs.get(name).ok_or_else(|| self.err(format!("missing attribute {name}")))?;
        if b.len as usize != expected {
            return Err(self.err(format!("length mismatch for attribute {name}: table lists {} values, expected {expected}", b.len)));
        }
        let start = b.offset as usize;
        let end = start + expected * 8;
        if b.offset % ALIGN as u64 != 0 {
            return Err(self.err(format!("attribute {name} is not 16-byte aligned (offset {start})")));
        }
        if end > self.bytes.len() {
            return Err(self.err(format!(
                "length mismatch for attribute {name}: needs bytes {start}..{end} but the file has {} bytes",
                self.bytes.len()
            )));
        }
        Ok(self.bytes[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    }

    fn cloud(&self, prefix: &str, t: &CloudToc) -> Result<GaussianCloud> {
        if t.sh_degree > 3 {
            return Err(self.err(format!("{prefix}: SH degree {} > 3", t.sh_degree)));
        }
        let n = t.count;
        let mut c = GaussianCloud::new(t.sh_degree);
        let width = c.sh_width();
        c.mu = self.blob(&format!("{prefix}.mu"), n * 3)?.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
        c.rot = self.blob(&format!("{prefix}.rot"), n * 4)?.chunks_exact(4).map(|v| [v[0], v[1], v[2], v[3]]).collect();
        c.log_scale = self.blob(&format!("{prefix}.log_scale"), n * 3)?.chunks_exact(3).map(|v| [v[0], v[1], v[2]]).collect();
        c.opacity_logit = self.blob(&format!("{prefix}.opacity_logit"), n)?;
        c.sh = self.blob(&format!("{prefix}.sh"), n * width)?;
        c.class = self
            .blob(&format!("{prefix}.class"), n)?
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let code = v as u32;
                (f64::from(code) == v)
                    .then(|| ClassTag::from_code(code))
                    .flatten()
                    .ok_or_else(|| self.err(format!("{prefix}.class[{i}]: invalid class code {v}")))
            })
            .collect::<Result<_>>()?;
        c.validate().map_err(|e| self.err(format!("{prefix}: {e}")))?;
        Ok(c)
    }
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let err = |message: String| CoreError::Checkpoint { path: path.to_string(), message };
    if bytes.len() < HEADER || &bytes[..5] != MAGIC {
        return Err(err("not an ASPL1 checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CoreError::UnsupportedVersion { what: "checkpoint", found: version, supported: VERSION });
    }
    let toc_len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let toc_bytes = bytes
        .get(HEADER..HEADER.saturating_add(toc_len))
        .ok_or_else(|| err(format!("table of contents needs {toc_len} bytes but the file has {}", bytes.len())))?;
    let toc: Toc = serde_json::from_slice(toc_bytes).map_err(|e| err(format!("table of contents: {e}")))?;
    let r = Reader { bytes, toc: &toc, path };
    let background = r.cloud("background", &toc.background)?;
    let mut objects = Vec::new();
    let mut corrections = Vec::new();
    for o in &toc.objects {
        let p = object_prefix(o.id);
        let cloud = r.cloud(&p, &o.cloud)?;
        let appearance = match &o.appearance {
            None => None,
            Some(a) => {
                let mut m = AppearanceModel {
                    frames: a.frames,
                    sh_width: a.sh_width,
                    pos_octaves: a.pos_octaves,
                    embeddings: Vec::new(),
                    weights: Vec::new(),
                    trained: Vec::new(),
                };
                m.embeddings = r.blob(&format!("{p}.embeddings"), a.frames * crate::foreground::appearance::EMBED_DIM)?;
                m.weights = r.blob(&format!("{p}.weights"), m.weight_count())?;
                m.trained = r.blob(&format!("{p}.trained"), a.frames)?.into_iter().map(|v| v != 0.0).collect();
                Some(m)
            }
        };
        objects.push(ForegroundObject { id: o.id, cloud, symmetry_axis: Vector3::from(o.symmetry_axis), appearance });
        corrections.push(o.correction);
    }
    Ok(Checkpoint { stage: toc.stage, background, objects, corrections, config: toc.config })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    std::fs::write(path, bytes).map_err(|source| CoreError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CoreError::Io { path: path.display().to_string(), source })?;
    decode(&bytes, &path.display().to_string())
}
