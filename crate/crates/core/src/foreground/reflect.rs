//! Mirror images of Gaussian clouds across a plane through the object origin.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::gaussian::{normalized, quat_to_matrix, CloudGrads, GaussianCloud};
use crate::sh;
use crate::{CoreError, Result};

/// Householder reflection `I − 2aaᵀ/‖a‖²`.
pub fn reflection_matrix(a: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let n2 = a.norm_squared();
    if !(n2 > 1e-24) || !n2.is_finite() {
        return Err(CoreError::InvalidAxis(format!("{:?} cannot be normalized", [a.x, a.y, a.z])));
    }
    Ok(Matrix3::identity() - 2.0 * a * a.transpose() / n2)
}

pub fn quat_mul(p: &[f64; 4], q: &[f64; 4]) -> [f64; 4] {
    [
        p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3],
        p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2],
        p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1],
        p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0],
    ]
}

/// Reflection across the plane with normal `axis`, with its SH operator.
#[derive(Debug, Clone)]
pub struct Reflection {
    pub axis: Vector3<f64>,
    pub matrix: Matrix3<f64>,
    pub sh: DMatrix<f64>,
    pub sh_degree: usize,
}

impl Reflection {
    pub fn new(axis: &Vector3<f64>, sh_degree: usize) -> Result<Reflection> {
        let matrix = reflection_matrix(axis)?;
        Ok(Reflection { axis: axis.normalize(), matrix, sh: sh::transform_matrix(&matrix, sh_degree), sh_degree })
    }

    /// Local axis of `q` most aligned with the mirror normal.
    fn flip_axis(&self, q: &[f64; 4]) -> usize {
        let along = quat_to_matrix(&normalized(*q)).transpose() * self.axis;
        let mut k = 0;
        for j in 1..3 {
            if along[j].abs() > along[k].abs() {
                k = j;
            }
        }
        k
    }

    /// `(0, a) ⊗ q ⊗ (0, e_k)`: the rotation `M·R` with its `k`-th column negated.
    /// The map is an orthogonal involution on ℝ⁴ for fixed `k`.
    fn rotate(&self, q: &[f64; 4], k: usize) -> [f64; 4] {
        let a = [0.0, self.axis.x, self.axis.y, self.axis.z];
        let mut e = [0.0; 4];
        e[k + 1] = 1.0;
        quat_mul(&quat_mul(&a, q), &e)
    }

    pub fn reflect_rotation(&self, q: &[f64; 4]) -> [f64; 4] {
        self.rotate(q, self.flip_axis(q))
    }

    pub fn reflect_sh(&self, coeffs: &[f64]) -> Vec<f64> {
        let w = 3 * sh::coeff_count(self.sh_degree);
        let mut out = Vec::with_capacity(coeffs.len());
        for block in coeffs.chunks(w) {
            out.extend(sh::apply_transform(&self.sh, block));
        }
        out
    }

    /// Mirror image of `cloud`: x̃ = Mx, Σ̃ = MΣM, colors seen along Mv equal
    /// the original's along v.
    pub fn reflect_cloud(&self, cloud: &GaussianCloud) -> GaussianCloud {
        assert_eq!(cloud.sh_degree, self.sh_degree, "sh degree mismatch");
        let mut out = cloud.clone();
        for i in 0..cloud.len() {
            let p = self.matrix * Vector3::from(cloud.mu[i]);
            out.mu[i] = [p.x, p.y, p.z];
            out.rot[i] = self.reflect_rotation(&cloud.rot[i]);
        }
        out.sh = self.reflect_sh(&cloud.sh);
        out
    }

    /// Pulls gradients taken w.r.t. the reflected cloud back to `original`.
    /// `sh` gradients pass through the transposed SH operator.
    pub fn pull_back(&self, original: &GaussianCloud, g: &CloudGrads) -> CloudGrads {
        let mut out = g.clone();
        let mt = self.matrix.transpose();
        for i in 0..original.len() {
            let d = mt * Vector3::from(g.mu[i]);
            out.mu[i] = [d.x, d.y, d.z];
            let k = self.flip_axis(&original.rot[i]);
            // the rotation map is symmetric, so its transpose is itself
            out.rot[i] = self.rotate(&g.rot[i], k);
        }
        out.sh = self.pull_back_sh(&g.sh);
        out
    }

    pub fn pull_back_sh(&self, g: &[f64]) -> Vec<f64> {
        let pt = self.sh.transpose();
        let w = 3 * sh::coeff_count(self.sh_degree);
        let mut out = Vec::with_capacity(g.len());
        for block in g.chunks(w) {
            out.extend(sh::apply_transform(&pt, block));
        }
        out
    }
}

/// Mirror image of an object-frame cloud across the plane through the origin
/// with normal `axis`.
pub fn reflect_gaussians(cloud: &GaussianCloud, axis: &Vector3<f64>) -> Result<GaussianCloud> {
    Ok(Reflection::new(axis, cloud.sh_degree)?.reflect_cloud(cloud))
}
