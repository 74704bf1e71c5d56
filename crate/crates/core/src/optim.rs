//! Adam over Gaussian attribute groups, plus densification and pruning.

use log::warn;
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gaussian::{normalized, quat_to_matrix, CloudGrads, GaussianCloud};
use crate::{CoreError, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First and second moments for one flat parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of every entry.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step_masked(params, grads, lr, 1, |_| true);
    }

    /// Adam update for entries grouped in blocks of `stride`; blocks with
    /// `update(block) == false` keep their parameters and moments untouched.
    pub fn step_masked(&mut self, params: &mut [f64], grads: &[f64], lr: f64, stride: usize, update: impl Fn(usize) -> bool) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (block, ((p, g), (m, v))) in params
            .chunks_mut(stride)
            .zip(grads.chunks(stride))
            .zip(self.m.chunks_mut(stride).zip(self.v.chunks_mut(stride)))
            .enumerate()
        {
            if !update(block) {
                continue;
            }
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + EPSILON);
            }
        }
    }

    /// Rebuilds the state for a resized tensor: block `i` of the result takes
    /// block `lineage[i]` of `self`, or zeros when `None`.
    pub fn remap(&self, lineage: &[Option<usize>], stride: usize) -> AdamState {
        let mut out = AdamState::new(lineage.len() * stride);
        out.t = self.t;
        for (i, src) in lineage.iter().enumerate() {
            if let Some(j) = src {
                out.m[i * stride..(i + 1) * stride].copy_from_slice(&self.m[j * stride..(j + 1) * stride]);
                out.v[i * stride..(i + 1) * stride].copy_from_slice(&self.v[j * stride..(j + 1) * stride]);
            }
        }
        out
    }
}

/// Learning rates per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mu: f64,
    /// Final μ rate as a fraction of `mu`, reached at the end of a stage.
    pub mu_final_factor: f64,
    pub rot: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub correction: f64,
    pub mlp: f64,
    pub embedding: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mu: 1.6e-4,
            mu_final_factor: 0.01,
            rot: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            correction: 1e-4,
            mlp: 1e-3,
            embedding: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("mu", self.mu),
            ("mu_final_factor", self.mu_final_factor),
            ("rot", self.rot),
            ("log_scale", self.log_scale),
            ("opacity", self.opacity),
            ("sh", self.sh),
            ("correction", self.correction),
            ("mlp", self.mlp),
            ("embedding", self.embedding),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::Config(format!("learning rate {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Exponentially decayed μ rate at `iter` of a stage of `total` iterations.
    pub fn mu_at(&self, iter: usize, total: usize) -> f64 {
        if total <= 1 || self.mu_final_factor <= 0.0 {
            return self.mu;
        }
        let f = (iter as f64 / (total - 1) as f64).clamp(0.0, 1.0);
        self.mu * self.mu_final_factor.powf(f)
    }
}

/// Attribute groups of a Gaussian cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Mu,
    Rot,
    LogScale,
    OpacityLogit,
    Sh,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Mu, Group::Rot, Group::LogScale, Group::OpacityLogit, Group::Sh];
}

/// Adam state for every attribute of a cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudOptimizer {
    pub mu: AdamState,
    pub rot: AdamState,
    pub log_scale: AdamState,
    pub opacity: AdamState,
    pub sh: AdamState,
    frozen: Vec<Group>,
    /// Keep Road and Sky positions fixed.
    pub lock_flat_positions: bool,
}

impl CloudOptimizer {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        CloudOptimizer {
            mu: AdamState::new(3 * n),
            rot: AdamState::new(4 * n),
            log_scale: AdamState::new(3 * n),
            opacity: AdamState::new(n),
            sh: AdamState::new(cloud.sh.len()),
            frozen: Vec::new(),
            lock_flat_positions: true,
        }
    }

    pub fn freeze(&mut self, g: Group) {
        if !self.frozen.contains(&g) {
            self.frozen.push(g);
        }
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen.contains(&g)
    }

    /// Applies one step; quaternions are renormalized afterwards.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &CloudGrads, lr: &LearningRates, mu_lr: f64) {
        if !self.is_frozen(Group::Mu) {
            let lock = self.lock_flat_positions;
            let class = &cloud.class;
            self.mu.step_masked(cloud.mu.as_flattened_mut(), grads.mu.as_flattened(), mu_lr, 3, |i| {
                !(lock && class[i].is_flat())
            });
        }
        if !self.is_frozen(Group::Rot) {
            self.rot.step(cloud.rot.as_flattened_mut(), grads.rot.as_flattened(), lr.rot);
            cloud.normalize_rotations();
        }
        if !self.is_frozen(Group::LogScale) {
            self.log_scale.step(cloud.log_scale.as_flattened_mut(), grads.log_scale.as_flattened(), lr.log_scale);
        }
        if !self.is_frozen(Group::OpacityLogit) {
            self.opacity.step(&mut cloud.opacity_logit, &grads.opacity_logit, lr.opacity);
        }
        if !self.is_frozen(Group::Sh) {
            self.sh.step(&mut cloud.sh, &grads.sh, lr.sh);
        }
    }

    /// Follows a densification: entry `i` of the new cloud inherits the
    /// moments of `lineage[i]`.
    pub fn remap(&mut self, lineage: &[Option<usize>], sh_width: usize) {
        self.mu = self.mu.remap(lineage, 3);
        self.rot = self.rot.remap(lineage, 4);
        self.log_scale = self.log_scale.remap(lineage, 3);
        self.opacity = self.opacity.remap(lineage, 1);
        self.sh = self.sh.remap(lineage, sh_width);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Mean screen-space positional gradient above which a Gaussian is densified.
    pub grad_threshold: f64,
    pub interval: usize,
    /// Largest scale (meters) at which a Gaussian is cloned rather than split.
    pub split_scale_threshold: f64,
    pub split_factor: f64,
    pub prune_opacity: f64,
    /// Cloud size cap as a multiple of the count at the start of training.
    pub max_growth: f64,
    /// Fraction of a stage after which densification stops.
    pub stop_fraction: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            enabled: true,
            grad_threshold: 0.001,
            interval: 100,
            split_scale_threshold: 0.1,
            split_factor: 1.6,
            prune_opacity: 0.005,
            max_growth: 4.0,
            stop_fraction: 0.5,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_threshold > 0.0) {
            return Err(CoreError::Config("densify grad_threshold must be > 0".into()));
        }
        if self.interval == 0 {
            return Err(CoreError::Config("densify interval must be >= 1".into()));
        }
        if !(self.split_factor > 1.0) {
            return Err(CoreError::Config("densify split_factor must be > 1".into()));
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(CoreError::Config("densify prune_opacity must be in [0, 1)".into()));
        }
        if !(self.max_growth >= 1.0) {
            return Err(CoreError::Config("densify max_growth must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether densification runs after iteration `iter` (0-based) of a stage.
    pub fn due(&self, iter: usize, total: usize) -> bool {
        self.enabled && (iter + 1) % self.interval == 0 && ((iter + 1) as f64) <= self.stop_fraction * total as f64
    }
}

/// Screen-space gradient statistics accumulated between densification passes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        DensifyStats { grad_sum: vec![0.0; n], count: vec![0; n] }
    }

    /// Adds one view's screen gradient for each visible Gaussian `(index, grad)`.
    pub fn record(&mut self, visible: impl IntoIterator<Item = (usize, f64)>) {
        for (i, g) in visible {
            self.grad_sum[i] += g;
            self.count[i] += 1;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub capped: bool,
    /// Source index of every Gaussian of the new cloud; `None` for new children.
    #[serde(skip)]
    pub lineage: Vec<Option<usize>>,
}

/// Clones, splits and prunes in one pass. Road and Sky Gaussians are never
/// touched. Survivors keep their relative order; new Gaussians are appended.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    max_count: usize,
    rng: &mut impl Rng,
) -> DensifyReport {
    let n = cloud.len();
    assert_eq!(stats.count.len(), n, "stats length");
    let mut report = DensifyReport::default();
    let mut keep = vec![true; n];
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        if cloud.class[i].is_flat() {
            continue;
        }
        if cloud.opacity(i) < cfg.prune_opacity {
            keep[i] = false;
            report.pruned += 1;
            continue;
        }
        if stats.mean(i) > cfg.grad_threshold {
            if cloud.scale(i).max() <= cfg.split_scale_threshold {
                clones.push(i);
            } else {
                splits.push(i);
            }
        }
    }
    let survivors = n - report.pruned;
    let growth = clones.len() + splits.len();
    let mut out = GaussianCloud::new(cloud.sh_degree);
    if survivors + growth > max_count {
        warn!("densification skipped: {} Gaussians would exceed the cap of {max_count}", survivors + growth);
        report.capped = true;
        clones.clear();
        splits.clear();
    }
    for &i in &splits {
        keep[i] = false;
    }
    for i in (0..n).filter(|&i| keep[i]) {
        out.push(cloud.primitive(i));
        report.lineage.push(Some(i));
    }
    for &i in &clones {
        out.push(cloud.primitive(i));
        report.lineage.push(None);
    }
    for &i in &splits {
        let s = cloud.scale(i);
        let r = quat_to_matrix(&normalized(cloud.rot[i]));
        let mu = Vector3::from(cloud.mu[i]);
        for _ in 0..2 {
            let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            let p = mu + r * s.component_mul(&z);
            let mut g = cloud.primitive(i);
            g.mu = [p.x, p.y, p.z];
            for k in 0..3 {
                g.log_scale[k] -= cfg.split_factor.ln();
            }
            out.push(g);
            report.lineage.push(None);
        }
    }
    report.cloned = clones.len();
    report.split = splits.len();
    *cloud = out;
    report
}
