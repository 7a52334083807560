//! Bidirectional advection of point primitives and loop-closing opacity blending.
//!
//! Dynamic primitives (mask bit set) are integrated forward and backward
//! through a velocity field with explicit Euler steps. Frame `t` shows the
//! forward copy at `forward[t]` with opacity `(1 − w)·α` and the backward copy
//! at `backward[T − t]` with opacity `w·α`, so frames 0 and T both place the
//! fully opaque copy at the initial position.

mod frame;

pub use frame::{
    FrameError, FrameRecord, FRAME_FLAG_BIDIRECTIONAL, FRAME_FLAG_COLORS, FRAME_HEADER_LEN, FRAME_MAGIC,
    FRAME_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, Vec3};
use crate::VelocityField;

pub const DEFAULT_HORIZON: usize = 120;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PropagationError {
    #[error("invalid gaussian set: {0}")]
    InvalidGaussians(String),
    #[error("invalid propagation config: {0}")]
    InvalidConfig(String),
    #[error("invalid motion seed: {0}")]
    InvalidSeed(String),
    #[error("non-finite position for primitive {index} at step {step}")]
    NonFinite { index: usize, step: usize },
    #[error("frame {t} outside 0..={horizon}")]
    FrameOutOfRange { t: usize, horizon: usize },
    #[error("trajectory cache does not match the gaussian set ({0})")]
    CacheMismatch(String),
}

/// Point primitives with opacity and a dynamic/static mask bit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    pub positions: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub motion_mask: Vec<bool>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl GaussianSet {
    pub fn new(
        positions: Vec<Vec3>,
        opacities: Vec<f64>,
        motion_mask: Vec<bool>,
        colors: Option<Vec<[f32; 3]>>,
    ) -> Result<Self, PropagationError> {
        let set = GaussianSet { positions, opacities, motion_mask, colors };
        set.validate()?;
        Ok(set)
    }

    /// All primitives static with the given opacity.
    pub fn from_cloud(cloud: &PointCloud, opacity: f64) -> Result<Self, PropagationError> {
        let n = cloud.positions.len();
        GaussianSet::new(cloud.positions.clone(), vec![opacity; n], vec![false; n], cloud.colors.clone())
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        let n = self.positions.len();
        if self.opacities.len() != n || self.motion_mask.len() != n {
            return Err(PropagationError::InvalidGaussians(format!(
                "{} positions, {} opacities, {} mask bits",
                n,
                self.opacities.len(),
                self.motion_mask.len()
            )));
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(PropagationError::InvalidGaussians(format!(
                    "{} colors for {n} positions",
                    c.len()
                )));
            }
        }
        if let Some(i) = self.positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(PropagationError::InvalidGaussians(format!("position {i} is not finite")));
        }
        if let Some(i) = self.opacities.iter().position(|a| !(0.0..=1.0).contains(a)) {
            return Err(PropagationError::InvalidGaussians(format!(
                "opacity {i} = {} outside [0, 1]",
                self.opacities[i]
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dynamic_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.motion_mask[i]).collect()
    }

    pub fn static_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.motion_mask[i]).collect()
    }

    /// Appends `other`; colors survive only if both sides carry them.
    pub fn append(&mut self, other: &GaussianSet) {
        let n = self.len();
        self.positions.extend_from_slice(&other.positions);
        self.opacities.extend_from_slice(&other.opacities);
        self.motion_mask.extend_from_slice(&other.motion_mask);
        self.colors = match (self.colors.take(), &other.colors) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if n == 0 => Some(b.clone()),
            _ => None,
        };
    }
}

/// User-placed anchor marking where dynamics should occur.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSeed {
    pub anchor: [f64; 3],
    /// Meters; `f64::INFINITY` covers everything.
    pub radius: f64,
    pub direction_hint: Option<[f64; 3]>,
}

impl MotionSeed {
    pub fn new(anchor: Vec3, radius: f64, direction_hint: Option<Vec3>) -> Result<Self, PropagationError> {
        let seed = MotionSeed {
            anchor: [anchor.x, anchor.y, anchor.z],
            radius,
            direction_hint: direction_hint.map(|h| [h.x, h.y, h.z]),
        };
        seed.validate()?;
        Ok(seed)
    }

    pub fn validate(&self) -> Result<(), PropagationError> {
        if !self.anchor.iter().all(|c| c.is_finite()) {
            return Err(PropagationError::InvalidSeed(format!("anchor {:?} is not finite", self.anchor)));
        }
        if !(self.radius > 0.0) {
            return Err(PropagationError::InvalidSeed(format!("radius {} must be positive", self.radius)));
        }
        if let Some(h) = self.hint() {
            if !((h.norm() - 1.0).abs() <= 1e-6) {
                return Err(PropagationError::InvalidSeed(format!("hint norm {} is not 1", h.norm())));
            }
        }
        Ok(())
    }

    pub fn anchor(&self) -> Vec3 {
        Vec3::from(self.anchor)
    }

    pub fn hint(&self) -> Option<Vec3> {
        self.direction_hint.map(Vec3::from)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (p - self.anchor()).norm() <= self.radius
    }
}

/// Sets `m = 1` exactly for primitives within some seed's radius.
pub fn mask_from_seeds(gaussians: &GaussianSet, seeds: &[MotionSeed]) -> GaussianSet {
    let mut out = gaussians.clone();
    for (m, p) in out.motion_mask.iter_mut().zip(&gaussians.positions) {
        *m = seeds.iter().any(|s| s.contains(p));
    }
    out
}

/// Like [`mask_from_seeds`], but a seed with a direction hint only claims
/// primitives whose local field velocity is within 90° of the hint. A zero
/// velocity never opposes a hint.
pub fn mask_from_seeds_with_hints<F: VelocityField + ?Sized>(
    gaussians: &GaussianSet,
    seeds: &[MotionSeed],
    field: &F,
) -> GaussianSet {
    let mut out = mask_from_seeds(gaussians, seeds);
    let candidates: Vec<usize> = out.dynamic_indices();
    if candidates.is_empty() || seeds.iter().all(|s| s.direction_hint.is_none()) {
        return out;
    }
    let points: Vec<Vec3> = candidates.iter().map(|&i| gaussians.positions[i]).collect();
    let velocities = field.velocities(&points);
    for ((&i, p), v) in candidates.iter().zip(&points).zip(&velocities) {
        out.motion_mask[i] = seeds.iter().any(|s| {
            s.contains(p)
                && match s.hint() {
                    Some(h) => h.dot(v) >= 0.0,
                    None => true,
                }
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlendSchedule {
    /// `w(t) = t / T`.
    #[default]
    Linear,
}

impl BlendSchedule {
    pub fn weight(&self, t: usize, horizon: usize) -> f64 {
        match self {
            BlendSchedule::Linear => t as f64 / horizon as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    #[default]
    Bidirectional,
    /// Forward trajectories only, at full opacity. Kept for comparison; the
    /// sequence does not loop.
    ForwardOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    /// Per-axis multiplier on field velocities (m/step).
    pub step: [f64; 3],
    pub horizon: usize,
    pub schedule: BlendSchedule,
    pub mode: PropagationMode,
    /// Apply seed direction hints when building masks.
    pub enforce_hints: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            step: [1.0; 3],
            horizon: DEFAULT_HORIZON,
            schedule: BlendSchedule::Linear,
            mode: PropagationMode::Bidirectional,
            enforce_hints: true,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<(), PropagationError> {
        if self.horizon < 1 {
            return Err(PropagationError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.horizon > u32::MAX as usize {
            return Err(PropagationError::InvalidConfig(format!("horizon {} too large", self.horizon)));
        }
        if !self.step.iter().all(|s| s.is_finite()) {
            return Err(PropagationError::InvalidConfig(format!("step {:?} is not finite", self.step)));
        }
        Ok(())
    }

    pub fn step_vector(&self) -> Vec3 {
        Vec3::from(self.step)
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.schedule.weight(t, self.horizon)
    }
}

/// Positions of the dynamic primitives at every step, both directions.
/// Memory is `2·(T+1)·N_dyn` positions (48 bytes per primitive per step).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCache {
    /// Indices into the gaussian set, ascending.
    pub dynamic: Vec<usize>,
    pub horizon: usize,
    /// Row-major `(T+1) × N_dyn`.
    pub forward: Vec<Vec3>,
    /// Row-major `(T+1) × N_dyn`; empty in forward-only mode.
    pub backward: Vec<Vec3>,
}

impl TrajectoryCache {
    pub fn dynamic_count(&self) -> usize {
        self.dynamic.len()
    }

    pub fn forward_at(&self, t: usize) -> &[Vec3] {
        let n = self.dynamic.len();
        &self.forward[t * n..(t + 1) * n]
    }

    pub fn backward_at(&self, t: usize) -> &[Vec3] {
        let n = self.dynamic.len();
        &self.backward[t * n..(t + 1) * n]
    }

    pub fn has_backward(&self) -> bool {
        !self.backward.is_empty() || self.dynamic.is_empty()
    }
}

fn integrate<F: VelocityField + ?Sized>(
    start: &[Vec3],
    indices: &[usize],
    field: &F,
    step: Vec3,
    horizon: usize,
    sign: f64,
) -> Result<Vec<Vec3>, PropagationError> {
    let n = start.len();
    let mut out = Vec::with_capacity((horizon + 1) * n);
    out.extend_from_slice(start);
    let scaled = sign * step;
    for t in 1..=horizon {
        let prev = &out[(t - 1) * n..t * n];
        let v = field.velocities(prev);
        let next: Vec<Vec3> = prev.iter().zip(&v).map(|(p, v)| p + scaled.component_mul(v)).collect();
        if let Some(k) = next.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(PropagationError::NonFinite { index: indices[k], step: t });
        }
        out.extend(next);
    }
    Ok(out)
}

/// Euler-integrates the masked primitives: `p_f(t) = p_f(t−1) + ψ⊙F(p_f(t−1))`
/// and `p_b(t) = p_b(t−1) − ψ⊙F(p_b(t−1))` for `t = 1..=T`.
pub fn integrate_bidirectional<F: VelocityField + ?Sized>(
    gaussians: &GaussianSet,
    field: &F,
    config: &PropagationConfig,
) -> Result<TrajectoryCache, PropagationError> {
    gaussians.validate()?;
    config.validate()?;
    let dynamic = gaussians.dynamic_indices();
    let start: Vec<Vec3> = dynamic.iter().map(|&i| gaussians.positions[i]).collect();
    let step = config.step_vector();
    let forward = integrate(&start, &dynamic, field, step, config.horizon, 1.0)?;
    let backward = match config.mode {
        PropagationMode::Bidirectional => integrate(&start, &dynamic, field, step, config.horizon, -1.0)?,
        PropagationMode::ForwardOnly => Vec::new(),
    };
    Ok(TrajectoryCache { dynamic, horizon: config.horizon, forward, backward })
}

/// One composed frame. Points are ordered static, then forward copies, then
/// backward copies (each dynamic block in ascending primitive order).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSet {
    pub positions: Vec<Vec3>,
    pub opacities: Vec<f64>,
    pub colors: Option<Vec<[f32; 3]>>,
    pub static_count: usize,
    pub forward_count: usize,
    pub backward_count: usize,
    /// Backward share `w(t)`; 0 in forward-only mode.
    pub blend_weight: f64,
}

impl RenderSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn static_range(&self) -> std::ops::Range<usize> {
        0..self.static_count
    }

    pub fn forward_range(&self) -> std::ops::Range<usize> {
        self.static_count..self.static_count + self.forward_count
    }

    pub fn backward_range(&self) -> std::ops::Range<usize> {
        let s = self.static_count + self.forward_count;
        s..s + self.backward_count
    }

    /// Position of each dynamic primitive's heavier copy (forward when `w ≤ ½`).
    pub fn dominant_positions(&self) -> Vec<Vec3> {
        if self.backward_count == 0 || self.blend_weight <= 0.5 {
            self.positions[self.forward_range()].to_vec()
        } else {
            self.positions[self.backward_range()].to_vec()
        }
    }

    /// Opacity mass of dynamic copies within any seed ball.
    pub fn region_density(&self, seeds: &[MotionSeed]) -> f64 {
        let dynamic = self.static_count..self.len();
        dynamic
            .filter(|&i| seeds.iter().any(|s| s.contains(&self.positions[i])))
            .map(|i| self.opacities[i])
            .sum()
    }
}

pub fn compose_frame(
    gaussians: &GaussianSet,
    cache: &TrajectoryCache,
    t: usize,
    config: &PropagationConfig,
) -> Result<RenderSet, PropagationError> {
    if t > cache.horizon {
        return Err(PropagationError::FrameOutOfRange { t, horizon: cache.horizon });
    }
    if cache.horizon != config.horizon {
        return Err(PropagationError::CacheMismatch(format!(
            "cache horizon {}, config horizon {}",
            cache.horizon, config.horizon
        )));
    }
    let n_dyn = cache.dynamic.len();
    if cache.dynamic.iter().any(|&i| i >= gaussians.len() || !gaussians.motion_mask[i])
        || n_dyn != gaussians.motion_mask.iter().filter(|&&m| m).count()
        || cache.forward.len() != (cache.horizon + 1) * n_dyn
    {
        return Err(PropagationError::CacheMismatch("dynamic index set differs".into()));
    }
    let bidirectional = config.mode == PropagationMode::Bidirectional;
    let w = if bidirectional { config.weight(t) } else { 0.0 };
    if bidirectional && cache.backward.len() != (cache.horizon + 1) * n_dyn {
        return Err(PropagationError::CacheMismatch("cache has no backward trajectories".into()));
    }

    let statics = gaussians.static_indices();
    let n_back = if bidirectional { n_dyn } else { 0 };
    let total = statics.len() + n_dyn + n_back;
    let mut positions = Vec::with_capacity(total);
    let mut opacities = Vec::with_capacity(total);
    let mut colors = gaussians.colors.as_ref().map(|_| Vec::with_capacity(total));

    let mut push = |i: usize, p: Vec3, a: f64| {
        positions.push(p);
        opacities.push(a);
        if let (Some(out), Some(src)) = (colors.as_mut(), gaussians.colors.as_ref()) {
            out.push(src[i]);
        }
    };
    for &i in &statics {
        push(i, gaussians.positions[i], gaussians.opacities[i]);
    }
    if bidirectional {
        for (&i, p) in cache.dynamic.iter().zip(cache.forward_at(t)) {
            push(i, *p, (1.0 - w) * gaussians.opacities[i]);
        }
        for (&i, p) in cache.dynamic.iter().zip(cache.backward_at(cache.horizon - t)) {
            push(i, *p, w * gaussians.opacities[i]);
        }
    } else {
        for (&i, p) in cache.dynamic.iter().zip(cache.forward_at(t)) {
            push(i, *p, gaussians.opacities[i]);
        }
    }
    Ok(RenderSet {
        positions,
        opacities,
        colors,
        static_count: statics.len(),
        forward_count: n_dyn,
        backward_count: n_back,
        blend_weight: w,
    })
}

/// Frames `0..=T` in order.
pub fn emit_sequence<F: VelocityField + ?Sized>(
    gaussians: &GaussianSet,
    field: &F,
    config: &PropagationConfig,
) -> Result<Vec<RenderSet>, PropagationError> {
    let cache = integrate_bidirectional(gaussians, field, config)?;
    (0..=config.horizon).map(|t| compose_frame(gaussians, &cache, t, config)).collect()
}
