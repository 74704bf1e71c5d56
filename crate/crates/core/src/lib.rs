//! Constrained Gaussian splatting for driving scenes: primitives, a CPU
//! differentiable rasterizer, losses, optimizer, and the background,
//! foreground and fusion stages.

pub mod background;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod foreground;
pub mod fusion;
pub mod gaussian;
pub mod init;
pub mod loss;
pub mod optim;
pub mod raster;
pub mod scenario;
pub mod sh;

pub use error::{CoreError, Result};
pub use gaussian::{ClassTag, CloudGrads, GaussianCloud, GaussianPrimitive};
