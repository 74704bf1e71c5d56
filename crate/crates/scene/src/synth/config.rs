use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub frame_count: usize,
    /// Frame indices written with `split = test`.
    pub test_frames: Vec<usize>,
    pub camera: CameraPath,
    pub road: RoadConfig,
    pub buildings: BuildingConfig,
    pub sky: SkyConfig,
    pub vehicles: Vec<VehicleConfig>,
    pub points: PointConfig,
    /// Samples per pixel along each axis for the color images.
    pub supersample: u32,
    /// Direction towards the light used for lambertian shading.
    pub light_dir: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraPath {
    /// Forward motion with fixed heading: `eye(f) = start + f * step`.
    Linear {
        start: [f64; 3],
        step: [f64; 3],
        yaw: f64,
        /// Downward tilt in radians.
        pitch_down: f64,
    },
    /// One camera per listed eye position, all aimed at `target`.
    LookAt {
        eyes: Vec<[f64; 3]>,
        target: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadConfig {
    pub half_width: f64,
    pub sidewalk_width: f64,
    pub asphalt: [f64; 3],
    pub marking: [f64; 3],
    pub sidewalk: [f64; 3],
    pub marking_width: f64,
    pub dash_length: f64,
    pub dash_period: f64,
    /// Amplitude of the smooth brightness variation on asphalt.
    pub texture_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildingConfig {
    pub enabled: bool,
    pub x_min: f64,
    pub x_max: f64,
    pub segment_length: f64,
    pub height_min: f64,
    pub height_max: f64,
    /// Height of the closing wall at `x_max` (0 disables it).
    pub end_wall_height: f64,
    pub window_contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkyConfig {
    pub horizon: [f64; 3],
    pub zenith: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleConfig {
    pub id: u16,
    /// (length, width, height) in meters.
    pub dims: [f64; 3],
    pub color: [f64; 3],
    /// (x, y, yaw) at frame 0; the box center sits at half height above the road.
    pub start: [f64; 3],
    /// (dx, dy, dyaw) per frame.
    pub velocity: [f64; 3],
    pub blinking: Option<BlinkSchedule>,
}

impl VehicleConfig {
    /// Rear lamp extent in the object frame: height above the box bottom and
    /// lateral distance |y| from the center line, both as ranges in meters.
    pub fn rear_lamp_band(&self) -> (std::ops::Range<f64>, std::ops::Range<f64>) {
        let [_, w, h] = self.dims;
        (0.3 * h..0.46 * h, 0.22 * w..0.44 * w)
    }

    /// Whether an object-frame point lies within `tol` meters of a rear lamp.
    pub fn near_rear_lamp(&self, p: &[f64; 3], tol: f64) -> bool {
        let [l, _, h] = self.dims;
        let (zb, ay) = self.rear_lamp_band();
        let z = p[2] + 0.5 * h;
        let y = p[1].abs();
        p[0] <= -0.5 * l + tol
            && z >= zb.start - tol
            && z <= zb.end + tol
            && y >= ay.start - tol
            && y <= ay.end + tol
    }
}

/// Rear lamps are lit on frames where `(frame + phase) % period < on_frames`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlinkSchedule {
    pub period: usize,
    pub on_frames: usize,
    #[serde(default)]
    pub phase: usize,
}

impl BlinkSchedule {
    pub fn is_on(&self, frame: usize) -> bool {
        (frame + self.phase) % self.period.max(1) < self.on_frames
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointConfig {
    pub road_density: f64,
    pub sidewalk_density: f64,
    pub facade_density: f64,
    pub noise_sigma: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub with_colors: bool,
}

impl Default for RoadConfig {
    fn default() -> Self {
        RoadConfig {
            half_width: 5.0,
            sidewalk_width: 3.5,
            asphalt: [0.34, 0.34, 0.36],
            marking: [0.88, 0.88, 0.84],
            sidewalk: [0.62, 0.58, 0.52],
            marking_width: 0.2,
            dash_length: 3.0,
            dash_period: 6.0,
            texture_amplitude: 0.04,
        }
    }
}

impl Default for BuildingConfig {
    fn default() -> Self {
        BuildingConfig {
            enabled: true,
            x_min: -6.0,
            x_max: 44.0,
            segment_length: 10.0,
            height_min: 9.0,
            height_max: 14.0,
            end_wall_height: 16.0,
            window_contrast: 0.35,
        }
    }
}

impl Default for SkyConfig {
    fn default() -> Self {
        SkyConfig {
            horizon: [0.78, 0.85, 0.92],
            zenith: [0.45, 0.62, 0.86],
        }
    }
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            id: 1,
            dims: [4.2, 1.8, 1.5],
            color: [0.72, 0.14, 0.12],
            start: [12.0, 2.0, 0.0],
            velocity: [0.5, 0.0, 0.0],
            blinking: None,
        }
    }
}

impl Default for PointConfig {
    fn default() -> Self {
        PointConfig {
            road_density: 80.0,
            sidewalk_density: 3.0,
            facade_density: 1.5,
            noise_sigma: 0.01,
            x_min: -4.0,
            x_max: 44.0,
            with_colors: true,
        }
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::street()
    }
}

impl GeneratorConfig {
    /// Straight street: ego camera drives along the right lane, two parked or
    /// moving cars, every fifth frame held out for evaluation.
    pub fn street() -> Self {
        GeneratorConfig {
            width: 128,
            height: 128,
            focal: 80.0,
            frame_count: 10,
            test_frames: vec![2, 7],
            camera: CameraPath::Linear {
                start: [0.0, -2.0, 1.6],
                step: [1.0, 0.0, 0.0],
                yaw: 0.0,
                pitch_down: 0.12,
            },
            road: RoadConfig::default(),
            buildings: BuildingConfig::default(),
            sky: SkyConfig::default(),
            vehicles: vec![
                VehicleConfig::default(),
                VehicleConfig {
                    id: 2,
                    dims: [4.6, 1.9, 1.6],
                    color: [0.15, 0.3, 0.62],
                    start: [22.0, -2.4, 0.0],
                    velocity: [0.8, 0.0, 0.0],
                    blinking: None,
                },
            ],
            points: PointConfig::default(),
            supersample: 2,
            light_dir: [0.35, 0.0, 0.94],
        }
    }

    /// A single symmetric car photographed only from its left side (+y in
    /// the object frame). Mirrored cameras give the unseen right-side ground truth.
    pub fn one_sided_car() -> Self {
        let eyes = (0..8)
            .map(|i| {
                let a = -0.9 + 1.8 * i as f64 / 7.0;
                [7.0 * a.sin(), 7.0 * a.cos(), 2.2]
            })
            .collect();
        GeneratorConfig {
            width: 96,
            height: 96,
            focal: 90.0,
            frame_count: 8,
            test_frames: vec![],
            camera: CameraPath::LookAt {
                eyes,
                target: [0.0, 0.0, 0.7],
            },
            buildings: BuildingConfig {
                enabled: false,
                ..BuildingConfig::default()
            },
            vehicles: vec![VehicleConfig {
                id: 1,
                start: [0.0, 0.0, 0.0],
                velocity: [0.0, 0.0, 0.0],
                ..VehicleConfig::default()
            }],
            points: PointConfig {
                x_min: -12.0,
                x_max: 12.0,
                ..PointConfig::default()
            },
            ..Self::street()
        }
    }

    /// Car seen from behind whose rear lamps blink every other frame.
    pub fn blinking_light() -> Self {
        let eyes = (0..12)
            .map(|i| {
                let a = std::f64::consts::PI + (-0.5 + i as f64 / 11.0) * 0.9;
                [7.5 * a.cos(), 7.5 * a.sin(), 2.0]
            })
            .collect();
        GeneratorConfig {
            width: 96,
            height: 96,
            focal: 90.0,
            frame_count: 12,
            test_frames: vec![],
            camera: CameraPath::LookAt {
                eyes,
                target: [0.0, 0.0, 0.7],
            },
            buildings: BuildingConfig {
                enabled: false,
                ..BuildingConfig::default()
            },
            vehicles: vec![VehicleConfig {
                id: 1,
                start: [0.0, 0.0, 0.0],
                velocity: [0.0, 0.0, 0.0],
                blinking: Some(BlinkSchedule {
                    period: 2,
                    on_frames: 1,
                    phase: 0,
                }),
                ..VehicleConfig::default()
            }],
            points: PointConfig {
                x_min: -12.0,
                x_max: 12.0,
                ..PointConfig::default()
            },
            ..Self::street()
        }
    }
}
