//! Real spherical harmonics up to degree 3 and their reflection operators.

use nalgebra::{DMatrix, Matrix3, Vector3};

pub const C0: f64 = 0.282_094_791_773_878_14;
pub const C1: f64 = 0.488_602_511_902_919_9;
pub const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_COEFFS: usize = 16;

pub fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at a unit direction; entries past `coeff_count(degree)` are zero.
pub fn basis(degree: usize, d: &Vector3<f64>) -> [f64; MAX_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; MAX_COEFFS];
    b[0] = C0;
    if degree >= 1 {
        b[1] = -C1 * y;
        b[2] = C1 * z;
        b[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * zz - xx - yy);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = C3[0] * y * (3.0 * xx - yy);
            b[10] = C3[1] * x * y * z;
            b[11] = C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = C3[5] * z * (xx - yy);
            b[15] = C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial w.r.t. (x, y, z), treating them as independent.
pub fn basis_jacobian(degree: usize, d: &Vector3<f64>) -> [[f64; 3]; MAX_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut j = [[0.0; 3]; MAX_COEFFS];
    if degree >= 1 {
        j[1] = [0.0, -C1, 0.0];
        j[2] = [0.0, 0.0, C1];
        j[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        j[4] = [C2[0] * y, C2[0] * x, 0.0];
        j[5] = [0.0, C2[1] * z, C2[1] * y];
        j[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        j[7] = [C2[3] * z, 0.0, C2[3] * x];
        j[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            j[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            j[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
            j[11] = [
                C3[2] * (-2.0 * x * y),
                C3[2] * (4.0 * zz - xx - 3.0 * yy),
                C3[2] * 8.0 * y * z,
            ];
            j[12] = [
                C3[3] * (-6.0 * x * z),
                C3[3] * (-6.0 * y * z),
                C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            j[13] = [
                C3[4] * (4.0 * zz - 3.0 * xx - yy),
                C3[4] * (-2.0 * x * y),
                C3[4] * 8.0 * x * z,
            ];
            j[14] = [C3[5] * 2.0 * x * z, -C3[5] * 2.0 * y * z, C3[5] * (xx - yy)];
            j[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -C3[6] * 6.0 * x * y, 0.0];
        }
    }
    j
}

/// Raw SH color (without offset or clamp) for coefficient-major `sh`.
pub fn raw_color(sh: &[f64], degree: usize, d: &Vector3<f64>) -> [f64; 3] {
    let b = basis(degree, d);
    let mut c = [0.0; 3];
    for (k, bk) in b.iter().take(coeff_count(degree)).enumerate() {
        for ch in 0..3 {
            c[ch] += bk * sh[k * 3 + ch];
        }
    }
    c
}

/// Color of a Gaussian seen along `view_dir`: SH + 0.5, clamped below at 0.
pub fn eval_sh_color(sh: &[f64], view_dir: &Vector3<f64>, degree: usize) -> [f64; 3] {
    raw_color(sh, degree, view_dir).map(|v| (v + 0.5).max(0.0))
}

/// Per-band matrix `P` with `Y(M v) = P Y(v)` for an orthogonal `m`, fitted by least
/// squares on a Fibonacci sphere. Applying `P` to coefficients gives a Gaussian
/// whose color seen along `M v` equals the original's color along `v`.
pub fn transform_matrix(m: &Matrix3<f64>, degree: usize) -> DMatrix<f64> {
    let n = coeff_count(degree);
    let samples = 4 * n + 32;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let dirs: Vec<Vector3<f64>> = (0..samples)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / samples as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for l in 0..=degree {
        let lo = l * l;
        let k = 2 * l + 1;
        let a = DMatrix::from_fn(samples, k, |i, j| basis(degree, &dirs[i])[lo + j]);
        let b = DMatrix::from_fn(samples, k, |i, j| basis(degree, &(m * dirs[i]))[lo + j]);
        // b = a Pᵀ
        let ata = a.transpose() * &a;
        let pt = ata
            .cholesky()
            .expect("SH sample matrix has full rank")
            .solve(&(a.transpose() * b));
        for r in 0..k {
            for c in 0..k {
                let v = pt[(c, r)];
                // snap numerically exact zeros and units
                let snapped = if v.abs() < 1e-12 {
                    0.0
                } else if (v.abs() - 1.0).abs() < 1e-12 {
                    v.signum()
                } else {
                    v
                };
                out[(lo + r, lo + c)] = snapped;
            }
        }
    }
    out
}

/// Applies a per-coefficient transform to a coefficient-major SH block.
pub fn apply_transform(p: &DMatrix<f64>, sh: &[f64]) -> Vec<f64> {
    let n = p.nrows();
    let mut out = vec![0.0; sh.len()];
    for r in 0..n {
        for c in 0..n {
            let w = p[(r, c)];
            if w != 0.0 {
                for ch in 0..3 {
                    out[r * 3 + ch] += w * sh[c * 3 + ch];
                }
            }
        }
    }
    out
}

/// Band order `m` of coefficient index `k`.
pub fn order_of(k: usize) -> i64 {
    let l = (k as f64).sqrt().floor() as i64;
    k as i64 - l * l - l
}
