//! Gaussian primitive, its parameterization, covariance and rotation helpers.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassTag {
    Road,
    Sky,
    Other,
    Foreground(u16),
}

impl ClassTag {
    /// Road and sky Gaussians keep their centers fixed and carry the flatness penalty.
    pub fn is_flat(self) -> bool {
        matches!(self, ClassTag::Road | ClassTag::Sky)
    }

    pub fn code(self) -> u32 {
        match self {
            ClassTag::Road => 1,
            ClassTag::Sky => 2,
            ClassTag::Other => 0,
            ClassTag::Foreground(k) => 0x1_0000 | k as u32,
        }
    }

    pub fn from_code(c: u32) -> Option<ClassTag> {
        match c {
            0 => Some(ClassTag::Other),
            1 => Some(ClassTag::Road),
            2 => Some(ClassTag::Sky),
            c if c & 0x1_0000 != 0 && c >> 17 == 0 => Some(ClassTag::Foreground(c as u16)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f64; 3],
    /// (w, x, y, z); free parameters, normalized on use.
    pub rot: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
    pub class: ClassTag,
}

/// Structure-of-arrays Gaussian store. `sh` holds `sh_width()` values per
/// Gaussian, coefficient-major: entry `k * 3 + c` is coefficient `k` of channel `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
    pub class: Vec<ClassTag>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= 3, "sh degree {sh_degree} > 3");
        GaussianCloud {
            sh_degree,
            mu: Vec::new(),
            rot: Vec::new(),
            log_scale: Vec::new(),
            opacity_logit: Vec::new(),
            sh: Vec::new(),
            class: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sh_coeffs(&self) -> usize {
        sh::coeff_count(self.sh_degree)
    }

    pub fn sh_width(&self) -> usize {
        3 * self.sh_coeffs()
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let w = self.sh_width();
        &self.sh[i * w..(i + 1) * w]
    }

    pub fn sh_of_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.sh_width();
        &mut self.sh[i * w..(i + 1) * w]
    }

    pub fn push(&mut self, g: GaussianPrimitive) {
        assert_eq!(g.sh.len(), self.sh_width(), "sh width mismatch");
        self.mu.push(g.mu);
        self.rot.push(g.rot);
        self.log_scale.push(g.log_scale);
        self.opacity_logit.push(g.opacity_logit);
        self.sh.extend_from_slice(&g.sh);
        self.class.push(g.class);
    }

    pub fn primitive(&self, i: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            mu: self.mu[i],
            rot: self.rot[i],
            log_scale: self.log_scale[i],
            opacity_logit: self.opacity_logit[i],
            sh: self.sh_of(i).to_vec(),
            class: self.class[i],
        }
    }

    /// Checks the array-length and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rot.len() != n
            || self.log_scale.len() != n
            || self.opacity_logit.len() != n
            || self.class.len() != n
            || self.sh.len() != n * self.sh_width()
        {
            return Err(CoreError::InvalidParameter(format!(
                "attribute arrays disagree in length (mu {n}, rot {}, log_scale {}, opacity {}, class {}, sh {} for width {})",
                self.rot.len(),
                self.log_scale.len(),
                self.opacity_logit.len(),
                self.class.len(),
                self.sh.len(),
                self.sh_width()
            )));
        }
        let finite = self.mu.iter().flatten().all(|v| v.is_finite())
            && self.rot.iter().flatten().all(|v| v.is_finite())
            && self.log_scale.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.sh.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CoreError::InvalidParameter("non-finite Gaussian attribute".into()));
        }
        if let Some(i) = self.rot.iter().position(|q| q.iter().all(|&v| v == 0.0)) {
            return Err(CoreError::InvalidParameter(format!("zero quaternion at {i}")));
        }
        Ok(())
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scale[i]).map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit[i])
    }

    pub fn rotation(&self, i: usize) -> Matrix3<f64> {
        quat_to_matrix(&normalized(self.rot[i]))
    }

    pub fn covariance(&self, i: usize) -> Result<Matrix3<f64>> {
        build_covariance(&normalized(self.rot[i]), &self.scale(i))
    }

    /// Copies the Gaussians at `idx` (in that order).
    pub fn select(&self, idx: &[usize]) -> GaussianCloud {
        let w = self.sh_width();
        let mut out = GaussianCloud::new(self.sh_degree);
        for &i in idx {
            out.mu.push(self.mu[i]);
            out.rot.push(self.rot[i]);
            out.log_scale.push(self.log_scale[i]);
            out.opacity_logit.push(self.opacity_logit[i]);
            out.sh.extend_from_slice(&self.sh[i * w..(i + 1) * w]);
            out.class.push(self.class[i]);
        }
        out
    }

    pub fn extend(&mut self, other: &GaussianCloud) {
        assert_eq!(self.sh_degree, other.sh_degree, "sh degree mismatch");
        self.mu.extend_from_slice(&other.mu);
        self.rot.extend_from_slice(&other.rot);
        self.log_scale.extend_from_slice(&other.log_scale);
        self.opacity_logit.extend_from_slice(&other.opacity_logit);
        self.sh.extend_from_slice(&other.sh);
        self.class.extend_from_slice(&other.class);
    }

    pub fn indices_where(&self, pred: impl Fn(ClassTag) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(self.class[i])).collect()
    }

    /// Renormalizes every quaternion to unit length.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rot {
            *q = normalized(*q);
        }
    }
}

/// Gradients w.r.t. the raw (pre-activation) parameters of a [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub mu: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<f64>,
    /// Screen-space positional gradient norm, for densification statistics.
    pub screen: Vec<f64>,
}

impl CloudGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        CloudGrads {
            mu: vec![[0.0; 3]; n],
            rot: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 3]; n],
            opacity_logit: vec![0.0; n],
            sh: vec![0.0; cloud.sh.len()],
            screen: vec![0.0; n],
        }
    }

    pub fn scale_by(&mut self, k: f64) {
        self.mu.as_flattened_mut().iter_mut().for_each(|v| *v *= k);
        self.rot.as_flattened_mut().iter_mut().for_each(|v| *v *= k);
        self.log_scale.as_flattened_mut().iter_mut().for_each(|v| *v *= k);
        self.opacity_logit.iter_mut().for_each(|v| *v *= k);
        self.sh.iter_mut().for_each(|v| *v *= k);
    }
}

pub fn normalized(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the unit quaternion entries.
pub fn quat_to_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let (g00, g01, g02) = (g[(0, 0)], g[(0, 1)], g[(0, 2)]);
    let (g10, g11, g12) = (g[(1, 0)], g[(1, 1)], g[(1, 2)]);
    let (g20, g21, g22) = (g[(2, 0)], g[(2, 1)], g[(2, 2)]);
    let dw = 2.0 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21);
    let dx = 2.0 * (y * g01 + z * g02 + y * g10 - 2.0 * x * g11 - w * g12 + z * g20 + w * g21
        - 2.0 * x * g22);
    let dy = 2.0 * (-2.0 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21
        - 2.0 * y * g22);
    let dz = 2.0 * (-2.0 * z * g00 - w * g01 + x * g02 + w * g10 - 2.0 * z * g11 + y * g12
        + x * g20
        + y * g21);
    [dw, dx, dy, dz]
}

/// Gradient through `q / |q|` for a raw quaternion.
pub fn normalize_backward(raw: &[f64; 4], g_unit: &[f64; 4]) -> [f64; 4] {
    let v = Vector4::from(*raw);
    let n = v.norm();
    let u = v / n;
    let g = Vector4::from(*g_unit);
    let out = (g - u * u.dot(&g)) / n;
    [out[0], out[1], out[2], out[3]]
}

/// Gradient of a loss w.r.t. a raw quaternion given its gradient w.r.t. the rotation matrix.
pub fn rotation_backward(raw: &[f64; 4], g_matrix: &Matrix3<f64>) -> [f64; 4] {
    let u = normalized(*raw);
    normalize_backward(raw, &quat_to_matrix_backward(&u, g_matrix))
}

pub fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(r);
    let mut out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out = out.map(|v| -v);
    }
    out
}

pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> [f64; 4] {
    let a = axis.normalize() * (0.5 * angle).sin();
    [(0.5 * angle).cos(), a.x, a.y, a.z]
}

/// Σ = R S Sᵀ Rᵀ with S = diag(s).
pub fn build_covariance(q: &[f64; 4], s: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if !q.iter().chain(s.iter()).all(|v| v.is_finite()) {
        return Err(CoreError::InvalidParameter("non-finite rotation or scale".into()));
    }
    if s.iter().any(|&v| v <= 0.0) {
        return Err(CoreError::InvalidParameter(format!("scale {s:?} not positive")));
    }
    let r = quat_to_matrix(&normalized(*q));
    let m = r * Matrix3::from_diagonal(s);
    let sigma = m * m.transpose();
    Ok(0.5 * (sigma + sigma.transpose()))
}

/// exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ)).
pub fn eval_gaussian(x: &Vector3<f64>, mu: &Vector3<f64>, sigma: &Matrix3<f64>) -> Result<f64> {
    let eig = sigma.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0 && lo >= 1e-12 * hi) {
        return Err(CoreError::DegenerateCovariance { index: None });
    }
    let chol = sigma
        .cholesky()
        .ok_or(CoreError::DegenerateCovariance { index: None })?;
    let d = x - mu;
    let q = d.dot(&chol.solve(&d));
    Ok((-0.5 * q).exp())
}

pub const GIMBAL_LIMIT: f64 = 1.0 - 1e-7;

/// Roll φ and pitch θ of a ZYX Euler decomposition: θ = −asin(R₃₁), φ = atan2(R₃₂, R₃₃).
pub fn extract_roll_pitch(q: &[f64; 4]) -> (f64, f64) {
    roll_pitch_of_matrix(&quat_to_matrix(&normalized(*q)))
}

pub fn roll_pitch_of_matrix(r: &Matrix3<f64>) -> (f64, f64) {
    let r31 = r[(2, 0)];
    if r31.abs() > GIMBAL_LIMIT {
        return (0.0, -r31.signum() * std::f64::consts::FRAC_PI_2);
    }
    (r[(2, 1)].atan2(r[(2, 2)]), -r31.asin())
}

/// Gradient of `a·φ + b·θ` w.r.t. the rotation matrix (zero in gimbal lock).
pub fn roll_pitch_backward(r: &Matrix3<f64>, d_phi: f64, d_theta: f64) -> Matrix3<f64> {
    let mut g = Matrix3::zeros();
    let r31 = r[(2, 0)];
    if r31.abs() > GIMBAL_LIMIT {
        return g;
    }
    g[(2, 0)] = -d_theta / (1.0 - r31 * r31).sqrt();
    let (r32, r33) = (r[(2, 1)], r[(2, 2)]);
    let den = r32 * r32 + r33 * r33;
    if den > 0.0 {
        g[(2, 1)] = d_phi * r33 / den;
        g[(2, 2)] = -d_phi * r32 / den;
    }
    g
}

/// Rigid 4×4 transform from rotation and translation.
pub fn rigid(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

pub fn split_rigid(m: &Matrix4<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    (
        m.fixed_view::<3, 3>(0, 0).into_owned(),
        m.fixed_view::<3, 1>(0, 3).into_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        proptest::array::uniform4(-1.0f64..1.0).prop_filter("nonzero", |q| {
            q.iter().map(|v| v * v).sum::<f64>() > 1e-3
        })
    }

    #[test]
    fn covariance_examples() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert_relative_eq!(
            build_covariance(&id, &Vector3::new(1.0, 1.0, 1.0)).unwrap(),
            Matrix3::identity()
        );
        assert_relative_eq!(
            build_covariance(&id, &Vector3::new(2.0, 1.0, 1.0)).unwrap(),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))
        );
        let qz = quat_from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        // oracle: explicit R S Sᵀ Rᵀ with a hand-written rotation
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let expected = r * s * s.transpose() * r.transpose();
        let got = build_covariance(&qz, &Vector3::new(2.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert_relative_eq!(got, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        let id = [1.0, 0.0, 0.0, 0.0];
        assert!(build_covariance(&id, &Vector3::new(f64::NAN, 1.0, 1.0)).is_err());
        assert!(build_covariance(&id, &Vector3::new(0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn gaussian_examples() {
        let mu = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(eval_gaussian(&mu, &mu, &Matrix3::identity()).unwrap(), 1.0);
        let v = eval_gaussian(&(mu + Vector3::x()), &mu, &Matrix3::identity()).unwrap();
        assert_relative_eq!(v, 0.606_530_659_712_633_4, epsilon = 1e-12);
        let s = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        let w = eval_gaussian(&(mu + 2.0 * Vector3::x()), &mu, &s).unwrap();
        assert_relative_eq!(w, (-0.5f64).exp(), epsilon = 1e-12);
        let singular = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
        assert!(matches!(
            eval_gaussian(&mu, &mu, &singular),
            Err(CoreError::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn roll_pitch_examples() {
        assert_eq!(extract_roll_pitch(&[1.0, 0.0, 0.0, 0.0]), (0.0, 0.0));
        let yaw = quat_from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_4);
        let (p, t) = extract_roll_pitch(&yaw);
        assert!(p.abs() < 1e-12 && t.abs() < 1e-12);
        let roll = quat_from_axis_angle(&Vector3::x(), 0.3);
        let (p, t) = extract_roll_pitch(&roll);
        assert_relative_eq!(p, 0.3, epsilon = 1e-12);
        assert!(t.abs() < 1e-12);
        let pitch = quat_from_axis_angle(&Vector3::y(), std::f64::consts::FRAC_PI_2);
        let (p, t) = extract_roll_pitch(&pitch);
        assert_eq!(p, 0.0);
        assert_relative_eq!(t, std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let q = [0.9, -0.2, 0.35, 0.1];
        let weights = Matrix3::new(0.3, -1.0, 0.2, 0.7, 0.1, -0.4, 0.5, 0.9, -0.6);
        let f = |q: &[f64; 4]| quat_to_matrix(&normalized(*q)).component_mul(&weights).sum();
        let g = rotation_backward(&q, &weights);
        for k in 0..4 {
            let h = 1e-6;
            let (mut a, mut b) = (q, q);
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert_relative_eq!(g[k], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn roll_pitch_backward_matches_finite_differences() {
        let q = normalized([0.95, 0.2, -0.15, 0.3]);
        let f = |q: &[f64; 4]| {
            let (p, t) = extract_roll_pitch(q);
            0.7 * p - 1.3 * t
        };
        let r = quat_to_matrix(&q);
        let g = rotation_backward(&q, &roll_pitch_backward(&r, 0.7, -1.3));
        for k in 0..4 {
            let h = 1e-6;
            let (mut a, mut b) = (q, q);
            a[k] += h;
            b[k] -= h;
            assert_relative_eq!(g[k], (f(&a) - f(&b)) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn class_codes_round_trip() {
        for c in [ClassTag::Road, ClassTag::Sky, ClassTag::Other, ClassTag::Foreground(0), ClassTag::Foreground(65535)] {
            assert_eq!(ClassTag::from_code(c.code()), Some(c));
        }
        assert_eq!(ClassTag::from_code(7), None);
    }

    proptest! {
        #[test]
        fn covariance_ignores_quaternion_sign(q in arb_quat(), s in proptest::array::uniform3(0.05f64..3.0)) {
            let s = Vector3::from(s);
            let neg = q.map(|v| -v);
            let a = build_covariance(&q, &s).unwrap();
            let b = build_covariance(&neg, &s).unwrap();
            prop_assert!((a - b).abs().max() < 1e-12);
        }

        #[test]
        fn covariance_spectrum_is_rotation_invariant(q in arb_quat(), s in proptest::array::uniform3(0.05f64..3.0)) {
            let s = Vector3::from(s);
            let sigma = build_covariance(&q, &s).unwrap();
            prop_assert!((sigma - sigma.transpose()).abs().max() < 1e-9);
            let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
            let mut sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            eig.sort_by(f64::total_cmp);
            sq.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&sq) {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + b));
            }
        }

        #[test]
        fn gaussian_is_rigid_invariant(
            q in arb_quat(),
            rq in arb_quat(),
            s in proptest::array::uniform3(0.2f64..2.0),
            x in proptest::array::uniform3(-2.0f64..2.0),
            t in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let sigma = build_covariance(&q, &Vector3::from(s)).unwrap();
            let r = quat_to_matrix(&normalized(rq));
            let t = Vector3::from(t);
            let (x, mu) = (Vector3::from(x), Vector3::new(0.3, -0.1, 0.2));
            let a = eval_gaussian(&x, &mu, &sigma).unwrap();
            let b = eval_gaussian(&(r * x + t), &(r * mu + t), &(r * sigma * r.transpose())).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn yaw_never_tilts(yaw in -3.14f64..3.14) {
            let (p, t) = extract_roll_pitch(&quat_from_axis_angle(&Vector3::z(), yaw));
            prop_assert!(p.abs() < 1e-12 && t.abs() < 1e-12);
        }
    }
}
