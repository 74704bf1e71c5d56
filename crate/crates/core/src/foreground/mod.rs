//! Foreground objects: template instancing, reflected-Gaussian supervision
//! and dynamic appearance.

pub mod appearance;
pub mod reflect;
pub mod template;
pub mod train;

pub use appearance::AppearanceModel;
pub use reflect::{reflect_gaussians, reflection_matrix, Reflection};
pub use template::{instantiate_template, TemplateModel};
pub use train::{init_objects, train_foreground, train_object, ForegroundConfig, ForegroundObject, ForegroundResult};
