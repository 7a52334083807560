//! Scene-level environmental dynamics.
//!
//! Per-view scene flows are consolidated into one globally consistent motion
//! field: flows are matched across views by reprojection, aligned with a
//! closed-form rotation + scale, and regressed by a multi-resolution hash-grid
//! field. Point primitives are then advected forward and backward through the
//! field and cross-faded so that the emitted sequence loops.
//!
//! Module map:
//! - [`geometry`]: pinhole cameras, depth maps, point clouds
//! - [`synthscene`]: analytic velocity fields and a synthetic expanding scene
//! - [`alignment`]: reprojection matching, Kabsch + refinement, merging
//! - [`motionfield`]: hash-grid encoding, regressor, training, checkpoints
//! - [`propagation`]: bidirectional advection, opacity blending, frame records
//! - [`metrics`]: k-NN graphs, MCA and FMV
//! - [`pipeline`]: world state, expansion steps, scene files, render loop, service

pub mod alignment;
pub mod geometry;
pub mod metrics;
pub mod motionfield;
pub mod pipeline;
pub mod propagation;
pub mod synthscene;
mod wire;

pub use alignment::{AlignmentTransform, CorrespondenceSet, FlowSampleSet};
pub use geometry::{PinholeCamera, PointCloud, Pose, Vec3};
pub use motionfield::{HashEncodingConfig, MotionField};
pub use propagation::{GaussianSet, MotionSeed, PropagationConfig};

/// A velocity field `ℝ³ → ℝ³` (m/step) that can be sampled at arbitrary points.
pub trait VelocityField {
    fn velocity(&self, x: &Vec3) -> Vec3;

    fn velocities(&self, xs: &[Vec3]) -> Vec<Vec3> {
        xs.iter().map(|x| self.velocity(x)).collect()
    }
}
