//! Analytic street world: an infinite ground plane, facade planes, a closing
//! wall and box-shaped cars, all textured procedurally and shaded with a
//! single directional light. Rays are intersected in closed form.

use nalgebra::{Matrix3, Matrix4, Vector3};

use super::config::{GeneratorConfig, VehicleConfig};
use crate::camera::{rigid, rotation_z};
use crate::image::{LABEL_OTHER, LABEL_ROAD, LABEL_SKY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub color: [f64; 3],
    pub label: u8,
    pub instance: u16,
    /// Ray hit a rear lamp of a car.
    pub lamp: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct Facade {
    /// +1 for the facade at +y, -1 for the one at -y.
    pub side: f64,
    pub x0: f64,
    pub x1: f64,
    pub height: f64,
    pub color: [f64; 3],
}

struct PlacedVehicle<'a> {
    cfg: &'a VehicleConfig,
    rot: Matrix3<f64>,
    trans: Vector3<f64>,
    lamps_on: bool,
}

pub struct World<'a> {
    pub(crate) cfg: &'a GeneratorConfig,
    pub(crate) seed: u64,
    pub(crate) facades: Vec<Facade>,
    light: Vector3<f64>,
}

const PALETTE: [[f64; 3]; 5] = [
    [0.74, 0.62, 0.48],
    [0.58, 0.6, 0.64],
    [0.8, 0.72, 0.6],
    [0.55, 0.42, 0.36],
    [0.68, 0.7, 0.62],
];

pub(crate) fn hash01(seed: u64, a: i64, b: i64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a as u64, b as u64] {
        h ^= v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(27).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (tx, ty) = (x - xf, y - yf);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(tx), s(ty));
    let (xi, yi) = (xf as i64, yf as i64);
    let v00 = hash01(seed, xi, yi);
    let v10 = hash01(seed, xi + 1, yi);
    let v01 = hash01(seed, xi, yi + 1);
    let v11 = hash01(seed, xi + 1, yi + 1);
    let a = v00 + (v10 - v00) * sx;
    let b = v01 + (v11 - v01) * sx;
    2.0 * (a + (b - a) * sy) - 1.0
}

fn scale(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Object-to-world pose of a vehicle at a frame (box center at half height).
pub fn vehicle_pose(v: &VehicleConfig, frame: usize) -> Matrix4<f64> {
    let f = frame as f64;
    let x = v.start[0] + v.velocity[0] * f;
    let y = v.start[1] + v.velocity[1] * f;
    let yaw = v.start[2] + v.velocity[2] * f;
    rigid(&rotation_z(yaw), &Vector3::new(x, y, 0.5 * v.dims[2]))
}

/// Axis-aligned parts of the car body in its object frame, as (min, max) corners.
pub fn vehicle_parts(dims: [f64; 3]) -> [(Vector3<f64>, Vector3<f64>); 2] {
    let [l, w, h] = dims;
    let split = -0.5 * h + 0.55 * h;
    [
        (
            Vector3::new(-0.5 * l, -0.5 * w, -0.5 * h),
            Vector3::new(0.5 * l, 0.5 * w, split),
        ),
        (
            Vector3::new(-0.32 * l, -0.44 * w, split),
            Vector3::new(0.18 * l, 0.44 * w, 0.5 * h),
        ),
    ]
}

fn ray_box(
    o: &Vector3<f64>,
    d: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 0.0;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut ta, mut tb) = ((lo[k] - o[k]) * inv, (hi[k] - o[k]) * inv);
        let mut s = -1.0;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            s = 1.0;
        }
        if ta > t0 {
            t0 = ta;
            axis = k;
            sign = s;
        }
        t1 = t1.min(tb);
    }
    if t0 > t1 || t0 <= 1e-9 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some((t0, n))
}

impl<'a> World<'a> {
    pub fn new(cfg: &'a GeneratorConfig, seed: u64) -> Self {
        let b = &cfg.buildings;
        let mut facades = Vec::new();
        if b.enabled {
            let n = ((b.x_max - b.x_min) / b.segment_length).ceil().max(1.0) as i64;
            for side in [1.0f64, -1.0] {
                for i in 0..n {
                    let x0 = b.x_min + i as f64 * b.segment_length;
                    let x1 = (x0 + b.segment_length).min(b.x_max);
                    let hsel = hash01(seed, i, side as i64 + 7);
                    let csel = hash01(seed, i, side as i64 + 19);
                    facades.push(Facade {
                        side,
                        x0,
                        x1,
                        height: b.height_min + (b.height_max - b.height_min) * hsel,
                        color: PALETTE[(csel * PALETTE.len() as f64) as usize % PALETTE.len()],
                    });
                }
            }
        }
        World {
            cfg,
            seed,
            facades,
            light: Vector3::from(cfg.light_dir).normalize(),
        }
    }

    pub(crate) fn facade_y(&self) -> f64 {
        self.cfg.road.half_width + self.cfg.road.sidewalk_width
    }

    pub(crate) fn max_height(&self) -> f64 {
        let b = &self.cfg.buildings;
        let facades = self.facades.iter().map(|f| f.height).fold(0.0, f64::max);
        if b.enabled {
            facades.max(b.end_wall_height)
        } else {
            0.0
        }
    }

    fn shade(&self, c: [f64; 3], n: &Vector3<f64>) -> [f64; 3] {
        scale(c, 0.55 + 0.45 * n.dot(&self.light).max(0.0))
    }

    /// Unshaded-then-shaded ground color and semantic label at `(x, y)`.
    pub(crate) fn ground(&self, x: f64, y: f64) -> ([f64; 3], u8) {
        let r = &self.cfg.road;
        let ay = y.abs();
        let up = Vector3::z();
        if ay < r.half_width {
            let half_mark = 0.5 * r.marking_width;
            let dashed = ay < half_mark && x.rem_euclid(r.dash_period) < r.dash_length;
            let edge = (ay - (r.half_width - 0.35)).abs() < half_mark;
            let c = if dashed || edge {
                r.marking
            } else {
                let k = 1.0 + r.texture_amplitude * smooth_noise(self.seed, x / 1.7, y / 1.7);
                scale(r.asphalt, k)
            };
            (self.shade(c, &up), LABEL_ROAD)
        } else if ay < r.half_width + r.sidewalk_width {
            let c = if ay < r.half_width + 0.25 {
                [0.46, 0.46, 0.46]
            } else if x.rem_euclid(2.0) < 0.08 {
                scale(r.sidewalk, 0.85)
            } else {
                r.sidewalk
            };
            (self.shade(c, &up), LABEL_OTHER)
        } else {
            (self.shade([0.38, 0.44, 0.3], &up), LABEL_OTHER)
        }
    }

    pub(crate) fn wall_texture(&self, base: [f64; 3], u: f64, z: f64) -> [f64; 3] {
        let contrast = self.cfg.buildings.window_contrast;
        let floor = z.rem_euclid(3.0);
        let col = u.rem_euclid(2.5);
        if z > 1.0 && (0.8..2.3).contains(&floor) && (0.6..1.9).contains(&col) {
            let k = 1.0 - contrast;
            [base[0] * k, base[1] * k, (base[2] * k + 0.05).min(1.0)]
        } else {
            base
        }
    }

    fn placed_vehicles(&self, frame: usize) -> Vec<PlacedVehicle<'a>> {
        self.cfg
            .vehicles
            .iter()
            .map(|v| {
                let pose = vehicle_pose(v, frame);
                PlacedVehicle {
                    cfg: v,
                    rot: pose.fixed_view::<3, 3>(0, 0).into_owned(),
                    trans: pose.fixed_view::<3, 1>(0, 3).into_owned(),
                    lamps_on: v.blinking.as_ref().is_some_and(|b| b.is_on(frame)),
                }
            })
            .collect()
    }

    /// Color in the object frame of a car surface point; second value marks emissive lamps.
    fn car_color(
        v: &VehicleConfig,
        part: usize,
        p: &Vector3<f64>,
        n: &Vector3<f64>,
        lamps_on: bool,
    ) -> ([f64; 3], bool, bool) {
        let [l, w, h] = v.dims;
        let base = v.color;
        let zb = p.z + 0.5 * h;
        let ay = p.y.abs();
        if part == 0 {
            if n.y.abs() > 0.5 {
                for cx in [-0.3 * l, 0.3 * l] {
                    let (dx, dz) = (p.x - cx, zb - 0.2 * h);
                    if dx * dx + dz * dz < (0.21 * h).powi(2) {
                        return ([0.07, 0.07, 0.07], false, false);
                    }
                }
                if (0.36 * h..0.41 * h).contains(&zb) {
                    return (scale(base, 0.55), false, false);
                }
                (base, false, false)
            } else if n.x > 0.5 {
                if (0.3 * h..0.45 * h).contains(&zb) {
                    if (0.22 * w..0.42 * w).contains(&ay) {
                        return ([0.95, 0.93, 0.8], true, false);
                    }
                    if ay < 0.17 * w {
                        return ([0.1, 0.1, 0.1], false, false);
                    }
                }
                (base, false, false)
            } else if n.x < -0.5 {
                let (lamp_z, lamp_y) = v.rear_lamp_band();
                if lamp_z.contains(&zb) && lamp_y.contains(&ay) {
                    let c = if lamps_on {
                        [1.0, 0.78, 0.3]
                    } else {
                        [0.3, 0.04, 0.03]
                    };
                    return (c, true, true);
                }
                (scale(base, 0.9), false, false)
            } else if n.z < -0.5 {
                ([0.05, 0.05, 0.05], false, false)
            } else {
                (base, false, false)
            }
        } else {
            let z0 = 0.55 * h;
            let ch = h - z0;
            let glass = [0.14, 0.17, 0.22];
            if n.z > 0.5 {
                return (scale(base, 0.95), false, false);
            }
            let in_band = zb > z0 + 0.1 * ch && zb < h - 0.14 * ch;
            let inner = if n.y.abs() > 0.5 {
                p.x > -0.3 * l && p.x < 0.16 * l
            } else {
                ay < 0.38 * w
            };
            if in_band && inner {
                (glass, false, false)
            } else {
                (base, false, false)
            }
        }
    }

    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>, frame: usize) -> Sample {
        self.trace_with(o, d, &self.placed_vehicles(frame))
    }

    /// Traces against static geometry only.
    pub fn trace_static(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Sample {
        self.trace_with(o, d, &[])
    }

    fn trace_with(&self, o: &Vector3<f64>, d: &Vector3<f64>, vehicles: &[PlacedVehicle]) -> Sample {
        let mut best_t = f64::INFINITY;
        let mut best = None;

        // ground
        if d.z < -1e-12 {
            let t = -o.z / d.z;
            if t > 1e-9 {
                let p = o + d * t;
                let (c, label) = self.ground(p.x, p.y);
                best_t = t;
                best = Some(Sample {
                    color: c,
                    label,
                    instance: 0,
                    lamp: false,
                });
            }
        }

        let fy = self.facade_y();
        if d.y.abs() > 1e-12 {
            for f in &self.facades {
                let t = (f.side * fy - o.y) / d.y;
                if t <= 1e-9 || t >= best_t {
                    continue;
                }
                let p = o + d * t;
                if p.x >= f.x0 && p.x <= f.x1 && p.z >= 0.0 && p.z <= f.height {
                    let n = Vector3::new(0.0, -f.side, 0.0);
                    let c = self.wall_texture(f.color, p.x, p.z);
                    best_t = t;
                    best = Some(Sample {
                        color: self.shade(c, &n),
                        label: LABEL_OTHER,
                        instance: 0,
                        lamp: false,
                    });
                }
            }
        }

        let b = &self.cfg.buildings;
        if b.enabled && b.end_wall_height > 0.0 && d.x.abs() > 1e-12 {
            let t = (b.x_max - o.x) / d.x;
            if t > 1e-9 && t < best_t {
                let p = o + d * t;
                if p.y.abs() <= fy && p.z >= 0.0 && p.z <= b.end_wall_height {
                    let n = Vector3::new(-1.0, 0.0, 0.0);
                    let c = self.wall_texture([0.66, 0.6, 0.56], p.y + 100.0, p.z);
                    best_t = t;
                    best = Some(Sample {
                        color: self.shade(c, &n),
                        label: LABEL_OTHER,
                        instance: 0,
                        lamp: false,
                    });
                }
            }
        }

        for v in vehicles {
            let ol = v.rot.transpose() * (o - v.trans);
            let dl = v.rot.transpose() * d;
            for (part, (lo, hi)) in vehicle_parts(v.cfg.dims).iter().enumerate() {
                if let Some((t, n)) = ray_box(&ol, &dl, lo, hi) {
                    if t < best_t {
                        let p = ol + dl * t;
                        let (c, emissive, lamp) = Self::car_color(v.cfg, part, &p, &n, v.lamps_on);
                        let color = if emissive {
                            c
                        } else {
                            self.shade(c, &(v.rot * n))
                        };
                        best_t = t;
                        best = Some(Sample {
                            color,
                            label: LABEL_OTHER,
                            instance: v.cfg.id,
                            lamp,
                        });
                    }
                }
            }
        }

        best.unwrap_or_else(|| Sample {
            color: self.sky(d),
            label: LABEL_SKY,
            instance: 0,
            lamp: false,
        })
    }

    fn sky(&self, d: &Vector3<f64>) -> [f64; 3] {
        let s = &self.cfg.sky;
        let e = d.z.clamp(0.0, 1.0).asin() / std::f64::consts::FRAC_PI_2;
        let t = e.sqrt();
        [
            s.horizon[0] + (s.zenith[0] - s.horizon[0]) * t,
            s.horizon[1] + (s.zenith[1] - s.horizon[1]) * t,
            s.horizon[2] + (s.zenith[2] - s.horizon[2]) * t,
        ]
    }

    /// Traces every pixel of a view at the given frame's object configuration.
    pub fn render(
        &self,
        camera: &crate::CameraView,
        frame: usize,
    ) -> (crate::ColorImage, crate::SemanticMask, Vec<bool>) {
        let (w, h) = (camera.width as usize, camera.height as usize);
        let vehicles = self.placed_vehicles(frame);
        let ss = self.cfg.supersample.max(1);
        let mut img = crate::ColorImage::new(w, h);
        let mut mask = crate::SemanticMask::new(w, h);
        let mut lamp = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let (o, d) = camera.ray(x as f64 + 0.5, y as f64 + 0.5);
                let center = self.trace_with(&o, &d, &vehicles);
                mask.labels[y * w + x] = center.label;
                mask.instance[y * w + x] = center.instance;
                lamp[y * w + x] = center.lamp;
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        let (o, d) = camera.ray(u, v);
                        let s = self.trace_with(&o, &d, &vehicles);
                        for c in 0..3 {
                            acc[c] += s.color[c];
                        }
                    }
                }
                let n = (ss * ss) as f64;
                img.set(x, y, [acc[0] / n, acc[1] / n, acc[2] / n]);
            }
        }
        (img.quantized(), mask, lamp)
    }
}
