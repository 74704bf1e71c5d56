//! Point-set container shared by scene point clouds and object templates.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   4   magic  b"ASPC"
//! 4   4   u32    container version (1)
//! 8   4   u32    header length H in bytes
//! 12  H   JSON   {"count": N, "has_rgb": bool, "dtype": "f32le"}
//! ..      zero padding up to the next multiple of 16
//! ..  12N f32    xyz, interleaved
//! ..      zero padding up to the next multiple of 16 (only when rgb follows)
//! ..  12N f32    rgb in [0, 1], interleaved (present iff has_rgb)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::SceneError;

pub const POINTS_MAGIC: &[u8; 4] = b"ASPC";
pub const POINTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointSet {
    pub positions: Vec<[f32; 3]>,
    pub colors: Option<Vec<[f32; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    count: usize,
    has_rgb: bool,
    dtype: String,
}

fn align16(n: usize) -> usize {
    n.div_ceil(16) * 16
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            count: self.positions.len(),
            has_rgb: self.colors.is_some(),
            dtype: "f32le".into(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(POINTS_MAGIC);
        out.extend_from_slice(&POINTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(align16(out.len()), 0);
        for p in &self.positions {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(colors) = &self.colors {
            out.resize(align16(out.len()), 0);
            for c in colors {
                for v in c {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<PointSet, SceneError> {
        let err = |m: String| SceneError::Points {
            path: path.to_path_buf(),
            message: m,
        };
        if bytes.len() < 12 || &bytes[0..4] != POINTS_MAGIC {
            return Err(err("missing ASPC magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != POINTS_VERSION {
            return Err(SceneError::UnsupportedVersion {
                what: "point container",
                found: version,
                supported: POINTS_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_bytes = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| err("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| err(format!("bad header: {e}")))?;
        if header.dtype != "f32le" {
            return Err(err(format!("unsupported dtype {}", header.dtype)));
        }
        let mut off = align16(12 + hlen);
        let read_block = |off: usize, name: &str| -> Result<Vec<[f32; 3]>, SceneError> {
            let len = header.count * 12;
            let block = bytes.get(off..off + len).ok_or_else(|| {
                err(format!(
                    "{name} block length mismatch: need {len} bytes at offset {off}, file has {}",
                    bytes.len()
                ))
            })?;
            Ok(block
                .chunks_exact(12)
                .map(|c| {
                    [
                        f32::from_le_bytes(c[0..4].try_into().unwrap()),
                        f32::from_le_bytes(c[4..8].try_into().unwrap()),
                        f32::from_le_bytes(c[8..12].try_into().unwrap()),
                    ]
                })
                .collect())
        };
        let positions = read_block(off, "xyz")?;
        off += header.count * 12;
        let colors = if header.has_rgb {
            Some(read_block(align16(off), "rgb")?)
        } else {
            None
        };
        Ok(PointSet { positions, colors })
    }

    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SceneError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<PointSet, SceneError> {
        let bytes = std::fs::read(path).map_err(|e| SceneError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
