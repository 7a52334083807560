//! The interactive expand → align → update → render loop.
//!
//! One update role owns the [`WorldState`] and runs [`WorldState::expand_step`];
//! render roles read immutable [`RenderSnapshot`]s published through a
//! [`SnapshotCell`]. Steps are copy-on-write: a failed step leaves the previous
//! state untouched.

mod render;
mod scenefile;
pub mod service;
mod world;
mod worldfile;

pub use render::{FrameOut, RenderLoop, RenderSnapshot, SnapshotCell};
pub use scenefile::{read_scene, write_scene, SceneError, SceneFile, SCENE_FORMAT_VERSION, SCENE_MAGIC_LINE};
pub use world::{
    lift_pixel_flow, ExpansionStep, FlowInput, SeedEntry, StageTimings, TrainSummary, ViewRecord, WorldState,
};
pub use worldfile::{WorldFileError, WORLD_MAGIC, WORLD_VERSION};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{DEFAULT_REFINE_ITERS, DEFAULT_REFINE_LR};
use crate::metrics::DEFAULT_K;
use crate::motionfield::{FieldConfig, TrainOptions};
use crate::propagation::PropagationConfig;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "SCENEDYN_DATA_DIR";

/// How each new view's flows join the accumulated set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AccumulationMode {
    /// Estimate `(R, s)` from correspondences and map new flows through it.
    #[default]
    Aligned,
    /// Same matching and de-duplication, but new flows are appended as given.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub field: FieldConfig,
    pub train: TrainOptions,
    pub propagation: PropagationConfig,
    pub mode: AccumulationMode,
    pub refine_iters: usize,
    pub refine_lr: f64,
    /// Re-initialize the field before every update instead of warm-starting.
    pub cold_start: bool,
    /// Neighbourhood size of the per-step metrics; 0 disables them.
    pub k: usize,
    /// Seeds the initial field parameters.
    pub field_seed: u64,
    /// Opacity given to newly ingested primitives.
    pub opacity: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            field: FieldConfig::default(),
            train: TrainOptions::default(),
            propagation: PropagationConfig::default(),
            mode: AccumulationMode::Aligned,
            refine_iters: DEFAULT_REFINE_ITERS,
            refine_lr: DEFAULT_REFINE_LR,
            cold_start: false,
            k: DEFAULT_K,
            field_seed: 0,
            opacity: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Mask,
    Lift,
    Match,
    Align,
    Merge,
    Train,
    Propagate,
    Metrics,
    Seeds,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Init => "init",
            Stage::Mask => "mask",
            Stage::Lift => "lift",
            Stage::Match => "match",
            Stage::Align => "align",
            Stage::Merge => "merge",
            Stage::Train => "train",
            Stage::Propagate => "propagate",
            Stage::Metrics => "metrics",
            Stage::Seeds => "seeds",
        };
        f.write_str(name)
    }
}

/// A pipeline failure attributed to the stage that raised it.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} stage failed: {message}")]
pub struct StepError {
    pub stage: Stage,
    pub message: String,
}

impl StepError {
    pub fn new(stage: Stage, err: impl fmt::Display) -> Self {
        StepError { stage, message: err.to_string() }
    }
}
