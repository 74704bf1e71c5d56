//! On-disk scene bundles, the pinhole camera model shared by every stage,
//! and a procedural street-scene generator whose ground truth comes from an
//! analytic ray caster.
//!
//! This crate deliberately knows nothing about Gaussians: the generator's
//! images are produced by intersecting rays with planes and boxes, so they can
//! serve as an oracle for the splatting pipeline built on top of it.

pub mod bundle;
pub mod camera;
pub mod error;
pub mod image;
pub mod points;
pub mod synth;

pub use bundle::{load_scene, save_scene, Frame, Manifest, ObjectTrack, SceneBundle, Split};
pub use camera::{CameraView, Intrinsics};
pub use error::SceneError;
pub use image::{ColorImage, SemanticMask};
pub use points::PointSet;
