//! Procedural street scenes rendered by analytic ray casting.

mod config;
mod generate;
mod world;

pub use config::{
    BlinkSchedule, BuildingConfig, CameraPath, GeneratorConfig, PointConfig, RoadConfig, SkyConfig,
    VehicleConfig,
};
pub use generate::{frame_cameras, generate_synthetic_scene, render_ground_truth, GroundTruthView};
pub use world::{vehicle_parts, vehicle_pose, Sample, World};
