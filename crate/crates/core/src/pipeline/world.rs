use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{AccumulationMode, PipelineConfig, Stage, StepError};
use crate::alignment::{
    kabsch_init, match_by_reprojection, match_positions, merge_aligned, refine_alignment,
    AlignmentDiagnostics, AlignmentTransform, CorrespondenceSet, FlowSampleSet,
};
use crate::geometry::{DepthMap, FlowGrid2d, PinholeCamera, PointCloud, Vec3};
use crate::metrics::{evaluate, MetricReport};
use crate::motionfield::MotionField;
use crate::propagation::{
    integrate_bidirectional, mask_from_seeds, mask_from_seeds_with_hints, GaussianSet, MotionSeed,
    PropagationConfig, TrajectoryCache,
};
use crate::synthscene::SyntheticView;
use crate::wire::fnv1a64;

/// Per-view flow as delivered by the estimator.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowInput {
    /// Already lifted 3D samples.
    Samples(FlowSampleSet),
    /// Per-pixel image flow plus the view's depth map.
    Pixels { depth: DepthMap, flow: FlowGrid2d },
}

/// One expansion view: camera, visible geometry and its flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub view_id: u32,
    pub camera: PinholeCamera,
    pub points: PointCloud,
    pub flow: FlowInput,
}

impl ViewRecord {
    pub fn from_synthetic(view: &SyntheticView) -> Self {
        ViewRecord {
            view_id: view.view_id,
            camera: view.camera,
            points: view.points.clone(),
            flow: FlowInput::Samples(view.flow_samples.clone()),
        }
    }

    /// The 3D samples, lifting pixel flow if needed.
    pub fn samples(&self) -> Result<FlowSampleSet, StepError> {
        match &self.flow {
            FlowInput::Samples(s) => {
                s.validate().map_err(|e| StepError::new(Stage::Lift, e))?;
                Ok(s.clone())
            }
            FlowInput::Pixels { depth, flow } => lift_pixel_flow(&self.camera, depth, flow, self.view_id),
        }
    }
}

/// Lifts image flow through depth: pixel `(u, v)` at depth `d` moves to
/// `(u + du, v + dv)` at the same depth. Pixels without valid depth are skipped.
pub fn lift_pixel_flow(
    camera: &PinholeCamera,
    depth: &DepthMap,
    flow: &FlowGrid2d,
    view_id: u32,
) -> Result<FlowSampleSet, StepError> {
    if depth.width as usize != flow.width || depth.height as usize != flow.height {
        return Err(StepError::new(
            Stage::Lift,
            format!("depth {}x{} vs flow {}x{}", depth.width, depth.height, flow.width, flow.height),
        ));
    }
    let mut out = FlowSampleSet::default();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let d = depth.get(x, y);
            if !(d > 0.0) {
                continue;
            }
            let [du, dv] = flow.get(x as usize, y as usize);
            let (u, v) = (x as f64, y as f64);
            let p0 = camera.unproject(u, v, d).map_err(|e| StepError::new(Stage::Lift, e))?;
            let p1 = camera.unproject(u + du, v + dv, d).map_err(|e| StepError::new(Stage::Lift, e))?;
            out.push(p0, p1 - p0, view_id);
        }
    }
    out.validate().map_err(|e| StepError::new(Stage::Lift, e))?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub id: u64,
    pub seed: MotionSeed,
}

/// Wall-clock seconds per stage of one expansion step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub mask: f64,
    pub lift: f64,
    pub matching: f64,
    pub alignment: f64,
    pub merge: f64,
    pub train: f64,
    pub propagate: f64,
    pub metrics: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.mask
            + self.lift
            + self.matching
            + self.alignment
            + self.merge
            + self.train
            + self.propagate
            + self.metrics
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub samples: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub box_refit: bool,
    pub reverted: bool,
    pub field_version: u64,
}

/// Report of one expansion step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionStep {
    pub step: u64,
    pub view_id: u32,
    pub timings: StageTimings,
    pub correspondences: usize,
    /// `None` when alignment was skipped (first view, no matches, naive mode).
    pub alignment: Option<AlignmentDiagnostics>,
    /// Transform applied to the new view's flows.
    pub transform: AlignmentTransform,
    pub new_gaussians: usize,
    pub new_samples: usize,
    pub accumulated: usize,
    pub dynamic: usize,
    pub train: TrainSummary,
    pub metrics: Option<MetricReport>,
}

impl ExpansionStep {
    pub fn to_json(&self) -> serde_json::Value {
        let (axis, angle) = self.transform.axis_angle();
        serde_json::json!({
            "step": self.step,
            "view_id": self.view_id,
            "timings": self.timings,
            "total_seconds": self.timings.total(),
            "correspondences": self.correspondences,
            "aligned": self.alignment.is_some(),
            "rotation_axis": [axis.x, axis.y, axis.z],
            "rotation_angle": angle,
            "scale": self.transform.scale,
            "alignment_objective": self.alignment.map(|a| [a.pre_objective, a.post_objective]),
            "new_gaussians": self.new_gaussians,
            "new_samples": self.new_samples,
            "accumulated": self.accumulated,
            "dynamic": self.dynamic,
            "train": self.train,
            "metrics": self.metrics.map(|m| serde_json::json!({"n": m.n, "k": m.k, "mca": m.mca, "fmv": m.fmv})),
        })
    }
}

/// Everything the update role owns. Large members sit behind `Arc` so that
/// snapshots and copy-on-write steps stay cheap.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub config: PipelineConfig,
    pub gaussians: Arc<GaussianSet>,
    pub accumulated_flows: Arc<FlowSampleSet>,
    pub field: MotionField,
    pub seeds: Vec<SeedEntry>,
    pub next_seed_id: u64,
    pub cameras: Vec<PinholeCamera>,
    pub step_counter: u64,
    /// Derived from gaussians, seeds, field and propagation config.
    pub trajectories: Arc<TrajectoryCache>,
}

impl PartialEq for WorldState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.gaussians == other.gaussians
            && self.accumulated_flows == other.accumulated_flows
            && self.field.config() == other.field.config()
            && self.field.bbox() == other.field.bbox()
            && self.field.box_fitted() == other.field.box_fitted()
            && self.field.version() == other.field.version()
            && self.field.params() == other.field.params()
            && self.seeds == other.seeds
            && self.next_seed_id == other.next_seed_id
            && self.cameras == other.cameras
            && self.step_counter == other.step_counter
            && self.trajectories == other.trajectories
    }
}

fn time<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot = start.elapsed().as_secs_f64();
    out
}

impl WorldState {
    /// Fresh world over `initial`: every primitive static, no flows, an
    /// untrained field that predicts zero motion.
    pub fn new(config: PipelineConfig, initial: &PointCloud) -> Result<Self, StepError> {
        config.propagation.validate().map_err(|e| StepError::new(Stage::Init, e))?;
        if !(0.0..=1.0).contains(&config.opacity) {
            return Err(StepError::new(Stage::Init, format!("opacity {}", config.opacity)));
        }
        let gaussians =
            GaussianSet::from_cloud(initial, config.opacity).map_err(|e| StepError::new(Stage::Init, e))?;
        let field =
            MotionField::new(config.field, config.field_seed).map_err(|e| StepError::new(Stage::Init, e))?;
        let mut world = WorldState {
            config,
            gaussians: Arc::new(gaussians),
            accumulated_flows: Arc::new(FlowSampleSet::default()),
            field,
            seeds: Vec::new(),
            next_seed_id: 1,
            cameras: Vec::new(),
            step_counter: 0,
            trajectories: Arc::new(TrajectoryCache {
                dynamic: Vec::new(),
                horizon: config.propagation.horizon,
                forward: Vec::new(),
                backward: Vec::new(),
            }),
        };
        world.refresh_dynamics()?;
        Ok(world)
    }

    pub fn motion_seeds(&self) -> Vec<MotionSeed> {
        self.seeds.iter().map(|e| e.seed).collect()
    }

    /// Recomputes mask bits and trajectories from seeds, field and config.
    pub(crate) fn refresh_dynamics(&mut self) -> Result<(), StepError> {
        let seeds = self.motion_seeds();
        let masked = if self.config.propagation.enforce_hints {
            mask_from_seeds_with_hints(&self.gaussians, &seeds, &self.field)
        } else {
            mask_from_seeds(&self.gaussians, &seeds)
        };
        let cache = integrate_bidirectional(&masked, &self.field, &self.config.propagation)
            .map_err(|e| StepError::new(Stage::Propagate, e))?;
        self.gaussians = Arc::new(masked);
        self.trajectories = Arc::new(cache);
        Ok(())
    }

    /// Copy with one more seed; returns the server-assigned id.
    pub fn with_seed(&self, seed: MotionSeed) -> Result<(WorldState, u64), StepError> {
        seed.validate().map_err(|e| StepError::new(Stage::Seeds, e))?;
        let mut next = self.clone();
        let id = next.next_seed_id;
        next.next_seed_id += 1;
        next.seeds.push(SeedEntry { id, seed });
        next.refresh_dynamics()?;
        Ok((next, id))
    }

    pub fn without_seed(&self, id: u64) -> Result<WorldState, StepError> {
        let mut next = self.clone();
        let before = next.seeds.len();
        next.seeds.retain(|e| e.id != id);
        if next.seeds.len() == before {
            return Err(StepError::new(Stage::Seeds, format!("no seed with id {id}")));
        }
        next.refresh_dynamics()?;
        Ok(next)
    }

    pub fn with_propagation(&self, propagation: PropagationConfig) -> Result<WorldState, StepError> {
        propagation.validate().map_err(|e| StepError::new(Stage::Propagate, e))?;
        let mut next = self.clone();
        next.config.propagation = propagation;
        next.refresh_dynamics()?;
        Ok(next)
    }

    /// Runs one expansion on a copy: mask, lift, match, align, merge, train,
    /// propagate, metrics. `self` is never modified.
    pub fn expand_step(&self, view: &ViewRecord) -> Result<(WorldState, ExpansionStep), StepError> {
        let camera = PinholeCamera::new(
            view.camera.fx,
            view.camera.fy,
            view.camera.cx,
            view.camera.cy,
            view.camera.width,
            view.camera.height,
            view.camera.pose,
        )
        .map_err(|e| StepError::new(Stage::Mask, e))?;
        let mut t = StageTimings::default();
        let mut next = self.clone();

        // New geometry: points already covered by a primitive in this camera are dropped.
        let new_gaussians = time(&mut t.mask, || -> Result<usize, StepError> {
            let added = PointCloud::new(view.points.positions.clone(), view.points.colors.clone())
                .map_err(|e| StepError::new(Stage::Mask, e))?;
            let covered = match_positions(&added.positions, &self.gaussians.positions, &camera);
            let mut keep = vec![true; added.len()];
            for &(a, _) in &covered {
                keep[a] = false;
            }
            let idx: Vec<usize> = (0..added.len()).filter(|&i| keep[i]).collect();
            let fresh = GaussianSet::new(
                idx.iter().map(|&i| added.positions[i]).collect(),
                vec![self.config.opacity; idx.len()],
                vec![false; idx.len()],
                added.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            )
            .map_err(|e| StepError::new(Stage::Mask, e))?;
            let mut all = (*self.gaussians).clone();
            all.append(&fresh);
            next.gaussians = Arc::new(mask_from_seeds(&all, &self.motion_seeds()));
            Ok(idx.len())
        })?;

        let current = time(&mut t.lift, || view.samples())?;
        let new_samples = current.len();
        let accumulated = &*self.accumulated_flows;

        let matched = time(&mut t.matching, || {
            if accumulated.is_empty() {
                CorrespondenceSet::empty(camera)
            } else {
                match_by_reprojection(&current, accumulated, &camera)
            }
        });

        let (transform, alignment) = time(&mut t.alignment, || -> Result<_, StepError> {
            if matched.is_empty() || self.config.mode == AccumulationMode::Naive {
                return Ok((AlignmentTransform::identity(), None));
            }
            let (cur, acc) = matched.matched_vectors(&current, accumulated);
            let init = kabsch_init(&cur, &acc).map_err(|e| StepError::new(Stage::Align, e))?;
            let refined = refine_alignment(init, &cur, &acc, self.config.refine_iters, self.config.refine_lr);
            let diag = AlignmentDiagnostics {
                correspondences: matched.len(),
                pre_objective: refined.initial_objective,
                post_objective: refined.final_objective,
                transform: refined.transform,
            };
            Ok((refined.transform, Some(diag)))
        })?;

        let merged = time(&mut t.merge, || merge_aligned(&current, &matched, &transform, accumulated));
        next.accumulated_flows = Arc::new(merged);

        let report = time(&mut t.train, || {
            next.field.retrain_incremental(
                &next.accumulated_flows,
                &self.config.train,
                self.config.cold_start,
            )
        })
        .map_err(|e| StepError::new(Stage::Train, e))?;

        time(&mut t.propagate, || next.refresh_dynamics())?;

        let metrics = time(&mut t.metrics, || -> Result<_, StepError> {
            if self.config.k == 0 || next.accumulated_flows.len() < 2 {
                return Ok(None);
            }
            evaluate(&next.accumulated_flows, self.config.k)
                .map(Some)
                .map_err(|e| StepError::new(Stage::Metrics, e))
        })?;

        next.cameras.push(camera);
        next.step_counter += 1;
        let step = ExpansionStep {
            step: next.step_counter,
            view_id: view.view_id,
            timings: t,
            correspondences: matched.len(),
            alignment,
            transform,
            new_gaussians,
            new_samples,
            accumulated: next.accumulated_flows.len(),
            dynamic: next.trajectories.dynamic_count(),
            train: TrainSummary {
                iterations: report.iterations,
                samples: report.samples,
                initial_loss: report.initial_loss(),
                final_loss: report.final_loss,
                box_refit: report.box_refit,
                reverted: report.reverted,
                field_version: next.field.version(),
            },
            metrics,
        };
        Ok((next, step))
    }

    /// Replaces `self` only when the step succeeds.
    pub fn apply(&mut self, view: &ViewRecord) -> Result<ExpansionStep, StepError> {
        let (next, step) = self.expand_step(view)?;
        *self = next;
        Ok(step)
    }

    /// FNV-1a of the serialized world (derived trajectories excluded).
    pub fn state_hash(&self) -> u64 {
        fnv1a64(&self.to_bytes_unsealed())
    }

    pub fn query(&self, x: &Vec3) -> Vec3 {
        self.field.query(x)
    }
}
