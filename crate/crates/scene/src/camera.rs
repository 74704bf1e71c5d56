//! Pinhole camera with OpenCV axis conventions (x right, y down, z forward).
//!
//! Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`; its center sits at `(i + 0.5, j + 0.5)`.
//! With `cx = width / 2` a horizontally mirrored camera therefore maps pixel
//! column `i` onto `width - 1 - i` exactly.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::SceneError;

const RIGID_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub cam_to_world: Matrix4<f64>,
    pub width: u32,
    pub height: u32,
    pub frame_index: usize,
}

impl CameraView {
    /// Builds a camera after checking the rigid-transform and focal-length invariants.
    pub fn new(
        intrinsics: Intrinsics,
        cam_to_world: Matrix4<f64>,
        width: u32,
        height: u32,
        frame_index: usize,
    ) -> Result<Self, SceneError> {
        let view = CameraView {
            intrinsics,
            cam_to_world,
            width,
            height,
            frame_index,
        };
        view.validate("camera")?;
        Ok(view)
    }

    pub fn validate(&self, field: &str) -> Result<(), SceneError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.fx.is_finite() && k.fy.is_finite()) {
            return Err(SceneError::validation(
                format!("{field}.intrinsics"),
                format!(
                    "focal lengths must be positive, got fx={} fy={}",
                    k.fx, k.fy
                ),
            ));
        }
        if !(k.cx.is_finite() && k.cy.is_finite()) {
            return Err(SceneError::validation(
                format!("{field}.intrinsics"),
                "principal point must be finite",
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SceneError::validation(
                format!("{field}.width"),
                "image dimensions must be non-zero",
            ));
        }
        check_rigid(&self.cam_to_world)
            .map_err(|m| SceneError::validation(format!("{field}.cam_to_world"), m))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.cam_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-to-camera rotation `W`; camera coordinates are `W (p - center)`.
    pub fn world_to_camera_rotation(&self) -> Matrix3<f64> {
        self.rotation().transpose()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera_rotation() * (p - self.center())
    }

    pub fn right_axis(&self) -> Vector3<f64> {
        self.rotation().column(0).into_owned()
    }

    pub fn forward_axis(&self) -> Vector3<f64> {
        self.rotation().column(2).into_owned()
    }

    /// Pixel coordinates of a camera-space point (no bounds check).
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
    }

    /// Projects a world point; `None` when it is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        let (u, v) = self.project_camera_point(&pc);
        Some((u, v, pc.z))
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// World-space ray through continuous pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> (Vector3<f64>, Vector3<f64>) {
        let k = &self.intrinsics;
        let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let d = (self.rotation() * d_cam).normalize();
        (self.center(), d)
    }

    /// Same pose, resampled to a new resolution (intrinsics scaled per axis).
    pub fn resized(&self, width: u32, height: u32) -> CameraView {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        let k = &self.intrinsics;
        CameraView {
            intrinsics: Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: k.cx * sx,
                cy: k.cy * sy,
            },
            cam_to_world: self.cam_to_world,
            width,
            height,
            frame_index: self.frame_index,
        }
    }

    /// Sub-window `[x0, x0 + width) × [y0, y0 + height)` of this view as a camera of its own.
    pub fn cropped(&self, x0: u32, y0: u32, width: u32, height: u32) -> CameraView {
        let mut out = self.clone();
        out.intrinsics.cx -= x0 as f64;
        out.intrinsics.cy -= y0 as f64;
        out.width = width;
        out.height = height;
        out
    }

    /// Camera translated by `meters` along its own right axis, orientation unchanged.
    pub fn shifted_right(&self, meters: f64) -> CameraView {
        let mut out = self.clone();
        let c = self.center() + self.right_axis() * meters;
        out.cam_to_world.fixed_view_mut::<3, 1>(0, 3).copy_from(&c);
        out
    }

    /// Mirror image of this camera under the world reflection `x -> m (x - p0) + p0`.
    ///
    /// The camera x axis is negated to keep a proper rotation, so the mirrored
    /// camera sees the reflected world flipped horizontally; `cx` becomes
    /// `width - cx` so that the flip is exact in pixel space.
    pub fn mirrored(&self, m: &Matrix3<f64>, p0: &Vector3<f64>) -> CameraView {
        let flip = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let r = m * self.rotation() * flip;
        let c = m * (self.center() - p0) + p0;
        let mut out = self.clone();
        out.cam_to_world = rigid(&r, &c);
        out.intrinsics.cx = self.width as f64 - self.intrinsics.cx;
        out
    }

    /// Camera at `eye` looking towards `target` with world `+Z` up.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        width: u32,
        height: u32,
        frame_index: usize,
    ) -> CameraView {
        let f = (target - eye).normalize();
        let up = Vector3::z();
        let mut r = f.cross(&up);
        if r.norm() < 1e-9 {
            r = Vector3::x();
        }
        let r = r.normalize();
        let d = f.cross(&r);
        let rot = Matrix3::from_columns(&[r, d, f]);
        CameraView {
            intrinsics,
            cam_to_world: rigid(&rot, &eye),
            width,
            height,
            frame_index,
        }
    }
}

pub fn rigid(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Checks that a 4x4 matrix is a rigid transform with a proper rotation block.
pub fn check_rigid(m: &Matrix4<f64>) -> Result<(), String> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err("transform contains non-finite entries".into());
    }
    let r = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > RIGID_TOL {
        return Err(format!(
            "rotation block is not orthonormal (error {err:.3e})"
        ));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > RIGID_TOL {
        return Err(format!("rotation block has determinant {det}, expected +1"));
    }
    let last = m.row(3);
    if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
        return Err("bottom row must be [0, 0, 0, 1]".into());
    }
    Ok(())
}

pub fn mat4_to_rows(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

pub fn rows_to_mat4(rows: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| rows[r][c])
}

pub fn rotation_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
