//! Object templates: canonical point sets scaled to each object's box.

use std::path::Path;

use autosplat_scene::{ObjectTrack, PointSet};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gaussian::GaussianCloud;
use crate::init::{cloud_from_points, GRAY};
use crate::{ClassTag, CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateModel {
    /// Canonical-frame points, centered at the origin.
    pub points: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TemplateModel {
    pub fn aabb(&self) -> Result<(Vector3<f64>, Vector3<f64>)> {
        if self.points.is_empty() {
            return Err(CoreError::InvalidParameter("template has no points".into()));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        Ok((lo, hi))
    }

    pub fn from_point_set(ps: &PointSet) -> TemplateModel {
        TemplateModel {
            points: ps.positions.iter().map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect(),
            colors: ps.colors.as_ref().map(|c| c.iter().map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()),
        }
    }

    pub fn to_point_set(&self) -> PointSet {
        PointSet {
            positions: self.points.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
            colors: self.colors.as_ref().map(|c| c.iter().map(|c| [c[0] as f32, c[1] as f32, c[2] as f32]).collect()),
        }
    }

    pub fn load(path: &Path) -> Result<TemplateModel> {
        Ok(Self::from_point_set(&PointSet::load(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_point_set().save(path)?)
    }

    /// Symmetric car-like point set (box body with a wedge cabin) with AABB
    /// 4 × 2 × 1.5 m, mirror-symmetric across the plane y = 0.
    pub fn procedural_car(count: usize, seed: u64) -> TemplateModel {
        // quads (corner, edge u, edge v) on the y >= 0 half; mirrored below
        let (l, w, h) = (2.0, 1.0, 0.75);
        let body_top = 0.05;
        let cabin_w = 0.88;
        let (cb0, cb1, ct0, ct1) = (-1.3, 0.7, -1.0, 0.25);
        let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
        let quads: Vec<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> = vec![
            // body side
            (v(-l, w, -h), v(2.0 * l, 0.0, 0.0), v(0.0, 0.0, body_top + h)),
            // body front and back, half width
            (v(l, 0.0, -h), v(0.0, w, 0.0), v(0.0, 0.0, body_top + h)),
            (v(-l, 0.0, -h), v(0.0, w, 0.0), v(0.0, 0.0, body_top + h)),
            // hood and trunk deck
            (v(cb1, 0.0, body_top), v(l - cb1, 0.0, 0.0), v(0.0, w, 0.0)),
            (v(-l, 0.0, body_top), v(cb0 + l, 0.0, 0.0), v(0.0, w, 0.0)),
            // body shoulder outside the cabin
            (v(cb0, cabin_w, body_top), v(cb1 - cb0, 0.0, 0.0), v(0.0, w - cabin_w, 0.0)),
            // cabin roof
            (v(ct0, 0.0, h), v(ct1 - ct0, 0.0, 0.0), v(0.0, cabin_w, 0.0)),
            // windshield and rear window
            (v(cb1, 0.0, body_top), v(ct1 - cb1, 0.0, h - body_top), v(0.0, cabin_w, 0.0)),
            (v(cb0, 0.0, body_top), v(ct0 - cb0, 0.0, h - body_top), v(0.0, cabin_w, 0.0)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let areas: Vec<f64> = quads.iter().map(|(_, a, b)| a.cross(b).norm()).collect();
        // cabin side: trapezoid in the plane y = cabin_w
        let side_area = 0.5 * ((cb1 - cb0) + (ct1 - ct0)) * (h - body_top);
        let total: f64 = areas.iter().sum::<f64>() + side_area;
        let half = count / 2;
        let mut points = Vec::with_capacity(2 * half);
        while points.len() < half {
            let mut pick = rng.random_range(0.0..total);
            let mut p = None;
            for (q, &a) in quads.iter().zip(&areas) {
                if pick < a {
                    let (s, t): (f64, f64) = (rng.random(), rng.random());
                    p = Some(q.0 + q.1 * s + q.2 * t);
                    break;
                }
                pick -= a;
            }
            let p = p.or_else(|| {
                let (x, z) = (rng.random_range(cb0..cb1), rng.random_range(body_top..h));
                let f = (z - body_top) / (h - body_top);
                let (lo, hi) = (cb0 + f * (ct0 - cb0), cb1 + f * (ct1 - cb1));
                (lo..=hi).contains(&x).then(|| v(x, cabin_w, z))
            });
            if let Some(p) = p {
                points.push(p);
            }
        }
        let mirrored: Vec<Vector3<f64>> = points.iter().map(|p| v(p.x, -p.y, p.z)).collect();
        points.extend(mirrored);
        TemplateModel { points, colors: None }
    }
}

/// Object-frame Gaussians from a template: positions scaled per axis so the
/// template AABB matches the track's box, centered on the origin.
pub fn instantiate_template(template: &TemplateModel, track: &ObjectTrack, sh_degree: usize) -> Result<GaussianCloud> {
    let (lo, hi) = template.aabb()?;
    let ext = hi - lo;
    if ext.iter().any(|&e| !(e > 1e-9)) {
        return Err(CoreError::InvalidParameter(format!("template bounding box is degenerate: {ext:?}")));
    }
    let dims = Vector3::from(track.bbox_dims);
    if dims.iter().any(|&d| !(d > 0.0)) {
        return Err(CoreError::InvalidParameter(format!("object {} has non-positive box dims", track.object_id)));
    }
    let center = (lo + hi) / 2.0;
    let factor = dims.component_div(&ext);
    let points: Vec<Vector3<f64>> = template.points.iter().map(|p| (p - center).component_mul(&factor)).collect();
    let colors = template.colors.clone().unwrap_or_else(|| vec![GRAY; points.len()]);
    let classes = vec![ClassTag::Foreground(track.object_id); points.len()];
    Ok(cloud_from_points(&points, &colors, &classes, sh_degree))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(dims: [f64; 3]) -> ObjectTrack {
        ObjectTrack { object_id: 3, poses: vec![None], bbox_dims: dims.into(), symmetry_axis: Vector3::y() }
    }

    #[test]
    fn procedural_car_is_symmetric_with_expected_box() {
        let t = TemplateModel::procedural_car(2000, 1);
        assert_eq!(t.points.len(), 2000);
        let (lo, hi) = t.aabb().unwrap();
        assert!((hi - lo - Vector3::new(4.0, 2.0, 1.5)).norm() < 0.05);
        for i in 0..1000 {
            let (a, b) = (t.points[i], t.points[i + 1000]);
            assert!((a.x - b.x).abs() < 1e-12 && (a.y + b.y).abs() < 1e-12 && (a.z - b.z).abs() < 1e-12);
        }
    }

    #[test]
    fn instancing_scales_to_box() {
        let t = TemplateModel::procedural_car(500, 2);
        let (lo, hi) = t.aabb().unwrap();
        let ext = hi - lo;
        let same = instantiate_template(&t, &track([ext.x, ext.y, ext.z]), 0).unwrap();
        let c = (lo + hi) / 2.0;
        for (i, p) in t.points.iter().enumerate() {
            let q = Vector3::from(same.mu[i]);
            assert!((q - (p - c)).norm() < 1e-12);
        }
        let doubled = instantiate_template(&t, &track([2.0 * ext.x, ext.y, ext.z]), 0).unwrap();
        for i in 0..t.points.len() {
            assert_eq!(doubled.mu[i][0], 2.0 * same.mu[i][0]);
            assert_eq!(doubled.mu[i][1], same.mu[i][1]);
        }
        let dims = [4.4, 1.9, 1.6];
        let fitted = instantiate_template(&t, &track(dims), 2).unwrap();
        let (mut lo2, mut hi2) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
        for m in &fitted.mu {
            lo2 = lo2.inf(&Vector3::from(*m));
            hi2 = hi2.sup(&Vector3::from(*m));
        }
        for k in 0..3 {
            assert!((hi2[k] - lo2[k] - dims[k]).abs() < 1e-6);
        }
        assert!(fitted.class.iter().all(|c| *c == ClassTag::Foreground(3)));
        assert!((fitted.opacity(0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_or_flat_template_is_rejected() {
        let empty = TemplateModel { points: vec![], colors: None };
        assert!(instantiate_template(&empty, &track([1.0; 3]), 0).is_err());
        let flat = TemplateModel { points: vec![Vector3::zeros(), Vector3::new(1.0, 1.0, 0.0)], colors: None };
        assert!(instantiate_template(&flat, &track([1.0; 3]), 0).is_err());
    }
}
