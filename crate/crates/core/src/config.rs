//! Whole-pipeline configuration with JSON overrides and iteration scaling.

use serde::{Deserialize, Serialize};

use crate::background::{BackgroundConfig, TrainSettings};
use crate::foreground::ForegroundConfig;
use crate::fusion::FusionConfig;
use crate::loss::LossWeights;
use crate::optim::{DensifyConfig, LearningRates};
use crate::{CoreError, Result};

/// Densification interval never drops below this many iterations when
/// schedules are scaled down, so gradient statistics still average over
/// several views.
pub const MIN_SCALED_DENSIFY_INTERVAL: usize = 50;

/// Every tunable of the four stages. Missing JSON fields keep their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub weights: LossWeights,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    pub background: BackgroundConfig,
    pub foreground: ForegroundConfig,
    pub fusion: FusionConfig,
}

fn scale_iters(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

impl PipelineConfig {
    /// Parses overrides; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig =
            serde_path_to_error::deserialize(de).map_err(|e| CoreError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        if self.background.sh_degree > 3 || self.foreground.sh_degree > 3 {
            return Err(CoreError::Config("sh_degree must be at most 3".into()));
        }
        if self.background.sh_degree != self.foreground.sh_degree {
            return Err(CoreError::Config(format!(
                "background.sh_degree {} differs from foreground.sh_degree {}",
                self.background.sh_degree, self.foreground.sh_degree
            )));
        }
        Ok(())
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings { weights: self.weights, lr: self.lr, densify: self.densify }
    }

    /// Multiplies every stage's iteration count by `s` (at least one
    /// iteration each) and shortens the densification interval with it.
    pub fn scaled(&self, s: f64) -> Result<PipelineConfig> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(CoreError::Config(format!("iteration scale {s} must be positive")));
        }
        let mut c = *self;
        c.background.phase1_iters = scale_iters(c.background.phase1_iters, s);
        c.background.phase2_iters = scale_iters(c.background.phase2_iters, s);
        c.foreground.iters = scale_iters(c.foreground.iters, s);
        c.fusion.iters = scale_iters(c.fusion.iters, s);
        if s < 1.0 {
            c.densify.interval = scale_iters(c.densify.interval, s).max(MIN_SCALED_DENSIFY_INTERVAL).min(c.densify.interval);
        }
        Ok(c)
    }
}
