use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::config::{CameraPath, GeneratorConfig};
use super::world::{vehicle_pose, World};
use crate::bundle::{Frame, Metadata, ObjectTrack, SceneBundle, Split};
use crate::camera::{CameraView, Intrinsics};
use crate::image::{ColorImage, SemanticMask};
use crate::points::PointSet;

/// Rendered ground truth for one view, including which pixels show a rear lamp.
#[derive(Debug, Clone)]
pub struct GroundTruthView {
    pub image: ColorImage,
    pub mask: SemanticMask,
    pub lamp: Vec<bool>,
}

/// Cameras for every frame of the configured path.
pub fn frame_cameras(cfg: &GeneratorConfig) -> Vec<CameraView> {
    let intr = Intrinsics {
        fx: cfg.focal,
        fy: cfg.focal,
        cx: 0.5 * cfg.width as f64,
        cy: 0.5 * cfg.height as f64,
    };
    match &cfg.camera {
        CameraPath::Linear {
            start,
            step,
            yaw,
            pitch_down,
        } => (0..cfg.frame_count)
            .map(|f| {
                let eye = Vector3::from(*start) + Vector3::from(*step) * f as f64;
                let dir = Vector3::new(
                    yaw.cos() * pitch_down.cos(),
                    yaw.sin() * pitch_down.cos(),
                    -pitch_down.sin(),
                );
                CameraView::look_at(intr, eye, eye + dir, cfg.width, cfg.height, f)
            })
            .collect(),
        CameraPath::LookAt { eyes, target } => (0..cfg.frame_count)
            .map(|f| {
                let eye = Vector3::from(eyes[f % eyes.len()]);
                CameraView::look_at(intr, eye, Vector3::from(*target), cfg.width, cfg.height, f)
            })
            .collect(),
    }
}

/// Renders an arbitrary camera against the world state at `frame`.
pub fn render_ground_truth(
    cfg: &GeneratorConfig,
    seed: u64,
    camera: &CameraView,
    frame: usize,
) -> GroundTruthView {
    let world = World::new(cfg, seed);
    let (image, mask, lamp) = world.render(camera, frame);
    GroundTruthView { image, mask, lamp }
}

struct Patch {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    normal: Vector3<f64>,
    density: f64,
}

fn static_patches(world: &World) -> Vec<Patch> {
    let cfg = world.cfg;
    let p = &cfg.points;
    let r = &cfg.road;
    let len = p.x_max - p.x_min;
    let up = Vector3::z();
    let mut out = vec![Patch {
        origin: Vector3::new(p.x_min, -r.half_width, 0.0),
        u: Vector3::new(len, 0.0, 0.0),
        v: Vector3::new(0.0, 2.0 * r.half_width, 0.0),
        normal: up,
        density: p.road_density,
    }];
    for side in [1.0, -1.0] {
        out.push(Patch {
            origin: Vector3::new(p.x_min, side * r.half_width, 0.0),
            u: Vector3::new(len, 0.0, 0.0),
            v: Vector3::new(0.0, side * r.sidewalk_width, 0.0),
            normal: up,
            density: p.sidewalk_density,
        });
    }
    let fy = world.facade_y();
    for f in &world.facades {
        out.push(Patch {
            origin: Vector3::new(f.x0, f.side * fy, 0.0),
            u: Vector3::new(f.x1 - f.x0, 0.0, 0.0),
            v: Vector3::new(0.0, 0.0, f.height),
            normal: Vector3::new(0.0, -f.side, 0.0),
            density: p.facade_density,
        });
    }
    let b = &cfg.buildings;
    if b.enabled && b.end_wall_height > 0.0 {
        out.push(Patch {
            origin: Vector3::new(b.x_max, -fy, 0.0),
            u: Vector3::new(0.0, 2.0 * fy, 0.0),
            v: Vector3::new(0.0, 0.0, b.end_wall_height),
            normal: Vector3::new(-1.0, 0.0, 0.0),
            density: p.facade_density,
        });
    }
    out
}

fn sample_points(world: &World, rng: &mut ChaCha8Rng) -> PointSet {
    let cfg = world.cfg;
    let noise = Normal::new(0.0, cfg.points.noise_sigma.max(0.0)).expect("finite sigma");
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for patch in static_patches(world) {
        let area = patch.u.cross(&patch.v).norm();
        let n = (area * patch.density).round() as usize;
        for _ in 0..n {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let on_surface = patch.origin + patch.u * a + patch.v * b;
            let p = on_surface + patch.normal * noise.sample(rng);
            // color of the surface point as seen from straight along the normal
            let probe = on_surface + patch.normal * 0.5;
            let c = world.trace_static(&probe, &(-patch.normal)).color;
            positions.push([p.x as f32, p.y as f32, p.z as f32]);
            colors.push([c[0] as f32, c[1] as f32, c[2] as f32]);
        }
    }
    PointSet {
        positions,
        colors: cfg.points.with_colors.then_some(colors),
    }
}

/// Builds a complete scene bundle. Output depends only on `(cfg, seed)`.
pub fn generate_synthetic_scene(cfg: &GeneratorConfig, seed: u64) -> SceneBundle {
    let world = World::new(cfg, seed);
    let cameras = frame_cameras(cfg);
    let frames: Vec<Frame> = cameras
        .into_par_iter()
        .enumerate()
        .map(|(f, camera)| {
            let (image, mask, _) = world.render(&camera, f);
            Frame {
                camera,
                image,
                mask,
                timestamp: f as f64 * 0.1,
                split: if cfg.test_frames.contains(&f) {
                    Split::Test
                } else {
                    Split::Train
                },
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = sample_points(&world, &mut rng);

    let tracks = cfg
        .vehicles
        .iter()
        .map(|v| ObjectTrack {
            object_id: v.id,
            poses: (0..cfg.frame_count)
                .map(|f| Some(vehicle_pose(v, f)))
                .collect(),
            bbox_dims: Vector3::from(v.dims),
            symmetry_axis: Vector3::y(),
        })
        .collect();

    let p = &cfg.points;
    let r = &cfg.road;
    let b = &cfg.buildings;
    let (mut x0, mut x1) = (p.x_min, p.x_max);
    if b.enabled {
        x0 = x0.min(b.x_min);
        x1 = x1.max(b.x_max);
    }
    let y = r.half_width + r.sidewalk_width;
    let metadata = Metadata {
        bounds_min: [x0, -y, 0.0],
        bounds_max: [x1, y, world.max_height()],
        up_axis: "+Z".into(),
        generator: Some(serde_json::json!({
            "seed": seed,
            "config": serde_json::to_value(cfg).expect("config serializes"),
        })),
    };

    SceneBundle {
        frames,
        points,
        tracks,
        metadata,
    }
}
