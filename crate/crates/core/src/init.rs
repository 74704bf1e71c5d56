//! Gaussian initialization from point sets.

use std::collections::HashMap;

use autosplat_scene::{image::LABEL_OTHER, image::LABEL_ROAD, image::LABEL_SKY, Frame};
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::gaussian::{logit, GaussianCloud, GaussianPrimitive};
use crate::sh;
use crate::ClassTag;

pub const INITIAL_OPACITY: f64 = 0.1;
pub const GRAY: [f64; 3] = [0.5, 0.5, 0.5];
const MIN_SCALE: f64 = 1e-3;

/// Uniform hash grid for nearest-neighbour queries on surface-like point sets.
struct Grid {
    cell: f64,
    origin: Vector3<f64>,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[Vector3<f64>]) -> Grid {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let mut ext = [hi.x - lo.x, hi.y - lo.y, hi.z - lo.z];
        ext.sort_by(|a, b| b.total_cmp(a));
        // points mostly lie on surfaces: size cells from the two largest extents
        let area = (ext[0] * ext[1]).max(ext[0] * ext[0] * 1e-6).max(1e-12);
        let cell = (4.0 * area / points.len().max(1) as f64).sqrt().max(1e-6);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, &lo, p)).or_default().push(i);
        }
        Grid { cell, origin: lo, cells }
    }

    fn key(cell: f64, origin: &Vector3<f64>, p: &Vector3<f64>) -> [i64; 3] {
        let q = (p - origin) / cell;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    /// Distances to the `k` nearest other points, ascending.
    fn nearest(&self, points: &[Vector3<f64>], i: usize, k: usize) -> Vec<f64> {
        let k = k.min(points.len() - 1);
        let c = Self::key(self.cell, &self.origin, &points[i]);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(list) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &j in list {
                                if j != i {
                                    let d = (points[j] - points[i]).norm();
                                    let pos = best.partition_point(|&b| b <= d);
                                    if pos < k {
                                        best.insert(pos, d);
                                        best.truncate(k);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            // every point outside the searched block is at least ring * cell away
            if best.len() == k && best[k - 1] <= ring as f64 * self.cell {
                return best;
            }
            ring += 1;
            if ring > 64 && best.len() == k {
                return best;
            }
            if ring > 4096 {
                return best;
            }
        }
    }
}

/// Mean distance from each point to its `k` nearest neighbours.
pub fn knn_mean_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    if points.len() < 2 {
        return vec![0.0; points.len()];
    }
    let grid = Grid::new(points);
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let d = grid.nearest(points, i, k);
            d.iter().sum::<f64>() / d.len() as f64
        })
        .collect()
}

/// SH coefficients whose view-independent color is `rgb`.
pub fn sh_from_color(rgb: [f64; 3], sh_degree: usize) -> Vec<f64> {
    let mut s = vec![0.0; 3 * sh::coeff_count(sh_degree)];
    for c in 0..3 {
        s[c] = (rgb[c] - 0.5) / sh::C0;
    }
    s
}

/// Isotropic Gaussians at `points` with scale = mean distance to the 3
/// nearest neighbours and opacity 0.1.
pub fn cloud_from_points(points: &[Vector3<f64>], colors: &[[f64; 3]], classes: &[ClassTag], sh_degree: usize) -> GaussianCloud {
    assert_eq!(points.len(), colors.len());
    assert_eq!(points.len(), classes.len());
    let scales = knn_mean_distance(points, 3);
    let mut cloud = GaussianCloud::new(sh_degree);
    for i in 0..points.len() {
        let s = if scales[i] > 0.0 { scales[i].max(MIN_SCALE) } else { 0.1 };
        cloud.push(GaussianPrimitive {
            mu: [points[i].x, points[i].y, points[i].z],
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [s.ln(); 3],
            opacity_logit: logit(INITIAL_OPACITY),
            sh: sh_from_color(colors[i], sh_degree),
            class: classes[i],
        });
    }
    cloud
}

fn label_of(class: ClassTag) -> Option<u8> {
    match class {
        ClassTag::Road => Some(LABEL_ROAD),
        ClassTag::Sky => Some(LABEL_SKY),
        ClassTag::Other => Some(LABEL_OTHER),
        ClassTag::Foreground(_) => None,
    }
}

/// Ground-truth color of each background point in the nearest frame where it
/// lands on a non-foreground pixel of its own class; gray when there is none.
pub fn nearest_frame_colors(points: &[Vector3<f64>], classes: &[ClassTag], frames: &[&Frame]) -> Vec<[f64; 3]> {
    points
        .par_iter()
        .zip(classes.par_iter())
        .map(|(p, &class)| {
            let Some(label) = label_of(class) else { return GRAY };
            let mut best: Option<(f64, [f64; 3])> = None;
            for f in frames {
                let Some((u, v, _)) = f.camera.project(p) else { continue };
                if !f.camera.in_bounds(u, v) {
                    continue;
                }
                let (x, y) = (u as usize, v as usize);
                let idx = y * f.mask.width + x;
                if f.mask.instance[idx] != 0 || f.mask.labels[idx] != label {
                    continue;
                }
                let d = (f.camera.center() - p).norm();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, f.image.get(x, y)));
                }
            }
            best.map_or(GRAY, |(_, c)| c)
        })
        .collect()
}
