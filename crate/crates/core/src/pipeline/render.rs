//! Render role: composes frames from the latest published snapshot.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;

use super::world::WorldState;
use crate::propagation::{
    compose_frame, FrameRecord, GaussianSet, PropagationConfig, RenderSet, TrajectoryCache,
};

/// Everything a frame needs, frozen at publish time.
#[derive(Debug, Clone)]
pub struct RenderSnapshot {
    /// Publish counter of the owning [`SnapshotCell`].
    pub id: u64,
    pub field_version: u64,
    pub gaussians: Arc<GaussianSet>,
    pub trajectories: Arc<TrajectoryCache>,
    pub propagation: PropagationConfig,
}

impl RenderSnapshot {
    pub fn from_world(world: &WorldState, id: u64) -> Self {
        RenderSnapshot {
            id,
            field_version: world.field.version(),
            gaussians: world.gaussians.clone(),
            trajectories: world.trajectories.clone(),
            propagation: world.config.propagation,
        }
    }

    pub fn horizon(&self) -> usize {
        self.propagation.horizon
    }

    pub fn compose(&self, t: usize) -> RenderSet {
        compose_frame(&self.gaussians, &self.trajectories, t.min(self.horizon()), &self.propagation)
            .expect("snapshot trajectories match their gaussians")
    }
}

/// Atomic handoff point between the update role and render roles.
pub struct SnapshotCell {
    current: ArcSwap<RenderSnapshot>,
    published: AtomicU64,
}

impl SnapshotCell {
    pub fn new(world: &WorldState) -> Self {
        SnapshotCell {
            current: ArcSwap::from_pointee(RenderSnapshot::from_world(world, 0)),
            published: AtomicU64::new(0),
        }
    }

    /// Publishes `world`; readers pick it up at their next frame.
    pub fn publish(&self, world: &WorldState) -> u64 {
        let id = self.published.fetch_add(1, Ordering::SeqCst) + 1;
        self.current.store(Arc::new(RenderSnapshot::from_world(world, id)));
        id
    }

    pub fn load(&self) -> Arc<RenderSnapshot> {
        self.current.load_full()
    }
}

#[derive(Debug, Clone)]
pub struct FrameOut {
    pub t: usize,
    pub sequence: u64,
    pub snapshot_id: u64,
    pub field_version: u64,
    pub horizon: usize,
    pub frame: RenderSet,
}

impl FrameOut {
    pub fn record(&self) -> FrameRecord {
        FrameRecord::from_render_set(&self.frame, self.t, self.horizon, self.sequence, self.field_version)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacedStats {
    pub frames: u64,
    pub dropped: u64,
    pub elapsed: Duration,
}

impl PacedStats {
    pub fn fps(&self) -> f64 {
        self.frames as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

/// Cycles `t` through `0..=T`, reading the newest snapshot once per frame.
pub struct RenderLoop {
    cell: Arc<SnapshotCell>,
    t: usize,
    sequence: u64,
    playing: bool,
    pub dropped_frames: u64,
}

impl RenderLoop {
    pub fn new(cell: Arc<SnapshotCell>) -> Self {
        RenderLoop { cell, t: 0, sequence: 0, playing: true, dropped_frames: 0 }
    }

    pub fn playing(&self) -> bool {
        self.playing
    }

    pub fn cursor(&self) -> usize {
        self.t
    }

    pub fn play(&mut self) {
        self.playing = true;
    }

    pub fn pause(&mut self) {
        self.playing = false;
    }

    /// Pauses and moves the cursor; `t` is clamped to the current horizon.
    pub fn scrub(&mut self, t: usize) -> usize {
        self.playing = false;
        self.t = t.min(self.cell.load().horizon());
        self.t
    }

    /// Composes the frame at the cursor, then advances it when playing.
    pub fn next_frame(&mut self) -> FrameOut {
        let snap = self.cell.load();
        let horizon = snap.horizon();
        let t = self.t.min(horizon);
        let frame = snap.compose(t);
        self.sequence += 1;
        self.t = if self.playing { (t + 1) % (horizon + 1) } else { t };
        FrameOut {
            t,
            sequence: self.sequence,
            snapshot_id: snap.id,
            field_version: snap.field_version,
            horizon,
            frame,
        }
    }

    /// Emits `frames` frames at `fps`, counting frames that miss their slot.
    pub fn run_paced(&mut self, fps: f64, frames: u64, mut sink: impl FnMut(FrameOut)) -> PacedStats {
        let period = Duration::from_secs_f64(1.0 / fps);
        let start = Instant::now();
        let mut dropped = 0;
        for i in 0..frames {
            let deadline = start + period * (i as u32 + 1);
            sink(self.next_frame());
            let now = Instant::now();
            if now > deadline {
                dropped += 1;
            } else {
                std::thread::sleep(deadline - now);
            }
        }
        self.dropped_frames += dropped;
        PacedStats { frames, dropped, elapsed: start.elapsed() }
    }
}
