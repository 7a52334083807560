//! World snapshot format.
//!
//! Little-endian; all geometry in f64 so a round trip is lossless:
//!
//! ```text
//! magic        "SDWS"
//! version      u32
//! config       u64 length + UTF-8 JSON of PipelineConfig
//! counters     step_counter u64, next_seed_id u64
//! cameras      u64 n, then per camera fx fy cx cy f64, width height u32, pose 12×f64
//! seeds        u64 n, then per seed id u64, anchor 3×f64, radius f64, has_hint u8, hint 3×f64
//! gaussians    u64 n, positions 3n×f64, opacities n×f64, mask n×u8,
//!              has_colors u8, colors 3n×f32 (if present)
//! flows        u64 n, positions 3n×f64, vectors 3n×f64, view ids n×u32
//! field        embedded field checkpoint (its own header and checksum)
//! checksum     u64 FNV-1a of every preceding byte
//! ```
//!
//! Trajectories are not stored; they are recomputed on load.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::world::{SeedEntry, WorldState};
use super::PipelineConfig;
use crate::alignment::FlowSampleSet;
use crate::geometry::{PinholeCamera, Pose, Vec3};
use crate::motionfield::{read_checkpoint, write_checkpoint, CheckpointError};
use crate::propagation::{GaussianSet, MotionSeed, TrajectoryCache};
use crate::wire::{fnv1a64, Reader, ShortRead, Writer};

pub const WORLD_MAGIC: [u8; 4] = *b"SDWS";
pub const WORLD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WorldFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a world file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("world file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("world file truncated: needs {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("world file checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("embedded field: {0}")]
    Field(CheckpointError),
    #[error("invalid world file: {0}")]
    Invalid(String),
}

impl From<ShortRead> for WorldFileError {
    fn from(e: ShortRead) -> Self {
        WorldFileError::Truncated { needed: e.needed, available: e.available }
    }
}

fn vec3s(w: &mut Writer, vs: &[Vec3]) {
    for v in vs {
        w.f64(v.x);
        w.f64(v.y);
        w.f64(v.z);
    }
}

fn read_vec3s(r: &mut Reader, n: usize) -> Result<Vec<Vec3>, ShortRead> {
    let flat = r.f64s(n.checked_mul(3).unwrap_or(usize::MAX))?;
    Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

fn count(r: &mut Reader) -> Result<usize, WorldFileError> {
    let n = r.u64()?;
    // Every record takes at least one byte, so a count beyond the remaining
    // length can only come from a short or corrupted file.
    if n > r.remaining() as u64 {
        return Err(WorldFileError::Truncated {
            needed: r.position() + n as usize,
            available: r.position() + r.remaining(),
        });
    }
    Ok(n as usize)
}

impl WorldState {
    pub(crate) fn to_bytes_unsealed(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&WORLD_MAGIC);
        w.u32(WORLD_VERSION);
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        w.u64(config.len() as u64);
        w.bytes(&config);
        w.u64(self.step_counter);
        w.u64(self.next_seed_id);

        w.u64(self.cameras.len() as u64);
        for c in &self.cameras {
            for v in [c.fx, c.fy, c.cx, c.cy] {
                w.f64(v);
            }
            w.u32(c.width);
            w.u32(c.height);
            for v in c.pose.to_matrix_3x4() {
                w.f64(v);
            }
        }

        w.u64(self.seeds.len() as u64);
        for e in &self.seeds {
            w.u64(e.id);
            for v in e.seed.anchor {
                w.f64(v);
            }
            w.f64(e.seed.radius);
            w.u8(e.seed.direction_hint.is_some() as u8);
            for v in e.seed.direction_hint.unwrap_or([0.0; 3]) {
                w.f64(v);
            }
        }

        let g = &*self.gaussians;
        w.u64(g.len() as u64);
        vec3s(&mut w, &g.positions);
        for &a in &g.opacities {
            w.f64(a);
        }
        for &m in &g.motion_mask {
            w.u8(m as u8);
        }
        w.u8(g.colors.is_some() as u8);
        if let Some(colors) = &g.colors {
            for c in colors {
                w.f32s(c);
            }
        }

        let f = &*self.accumulated_flows;
        w.u64(f.len() as u64);
        vec3s(&mut w, &f.positions);
        vec3s(&mut w, &f.vectors);
        for &id in &f.view_ids {
            w.u32(id);
        }

        write_checkpoint(&self.field, &mut w);
        w.buf
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: self.to_bytes_unsealed() };
        w.seal();
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<WorldState, WorldFileError> {
        let mut r = Reader::new(data);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != WORLD_MAGIC {
            return Err(WorldFileError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != WORLD_VERSION {
            return Err(WorldFileError::VersionMismatch { found: version, expected: WORLD_VERSION });
        }
        let n = count(&mut r)?;
        let config_bytes = r.take(n)?;
        let step_counter = r.u64()?;
        let next_seed_id = r.u64()?;

        let n = count(&mut r)?;
        let mut cameras = Vec::with_capacity(n);
        for _ in 0..n {
            let [fx, fy, cx, cy]: [f64; 4] = r.f64s(4)?.try_into().expect("4 values");
            let (width, height) = (r.u32()?, r.u32()?);
            let m: [f64; 12] = r.f64s(12)?.try_into().expect("12 values");
            cameras.push((fx, fy, cx, cy, width, height, m));
        }

        let n = count(&mut r)?;
        let mut seeds = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u64()?;
            let anchor: [f64; 3] = r.f64s(3)?.try_into().expect("3 values");
            let radius = r.f64()?;
            let has_hint = r.u8()? != 0;
            let hint: [f64; 3] = r.f64s(3)?.try_into().expect("3 values");
            seeds.push(SeedEntry {
                id,
                seed: MotionSeed { anchor, radius, direction_hint: has_hint.then_some(hint) },
            });
        }

        let n = count(&mut r)?;
        let positions = read_vec3s(&mut r, n)?;
        let opacities = r.f64s(n)?;
        let mask: Vec<bool> = r.take(n)?.iter().map(|&b| b != 0).collect();
        let colors = if r.u8()? != 0 {
            let flat = r.f32s(n.checked_mul(3).unwrap_or(usize::MAX))?;
            Some(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>())
        } else {
            None
        };

        let n = count(&mut r)?;
        let flow_positions = read_vec3s(&mut r, n)?;
        let flow_vectors = read_vec3s(&mut r, n)?;
        let mut view_ids = Vec::with_capacity(n);
        for _ in 0..n {
            view_ids.push(r.u32()?);
        }

        let body = r.position();
        let (field, used) = read_checkpoint(&data[body..]).map_err(|e| match e {
            CheckpointError::Truncated { needed, available } => {
                WorldFileError::Truncated { needed: body + needed, available: body + available }
            }
            CheckpointError::ChecksumMismatch { stored, computed } => {
                WorldFileError::ChecksumMismatch { stored, computed }
            }
            other => WorldFileError::Field(other),
        })?;
        let end = body + used;
        if data.len() < end + 8 {
            return Err(WorldFileError::Truncated { needed: end + 8, available: data.len() });
        }
        let stored = u64::from_le_bytes(data[end..end + 8].try_into().expect("8 bytes"));
        let computed = fnv1a64(&data[..end]);
        if stored != computed {
            return Err(WorldFileError::ChecksumMismatch { stored, computed });
        }
        if data.len() > end + 8 {
            return Err(WorldFileError::Invalid(format!("{} trailing bytes", data.len() - end - 8)));
        }

        let invalid = |e: String| WorldFileError::Invalid(e);
        let config: PipelineConfig =
            serde_json::from_slice(config_bytes).map_err(|e| invalid(format!("config: {e}")))?;
        if *field.config() != config.field {
            return Err(invalid("field configuration differs from the pipeline configuration".into()));
        }
        let cameras = cameras
            .into_iter()
            .map(|(fx, fy, cx, cy, width, height, m)| {
                let pose = Pose::from_matrix_3x4(&m).map_err(|e| invalid(e.to_string()))?;
                PinholeCamera::new(fx, fy, cx, cy, width, height, pose).map_err(|e| invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for e in &seeds {
            e.seed.validate().map_err(|err| invalid(err.to_string()))?;
        }
        let gaussians =
            GaussianSet::new(positions, opacities, mask, colors).map_err(|e| invalid(e.to_string()))?;
        let flows =
            FlowSampleSet::new(flow_positions, flow_vectors, view_ids).map_err(|e| invalid(e.to_string()))?;

        let mut world = WorldState {
            config,
            gaussians: Arc::new(gaussians),
            accumulated_flows: Arc::new(flows),
            field,
            seeds,
            next_seed_id,
            cameras,
            step_counter,
            trajectories: Arc::new(TrajectoryCache {
                dynamic: Vec::new(),
                horizon: config.propagation.horizon,
                forward: Vec::new(),
                backward: Vec::new(),
            }),
        };
        world.refresh_dynamics().map_err(|e| invalid(e.to_string()))?;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldFileError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WorldState, WorldFileError> {
        WorldState::from_bytes(&std::fs::read(path)?)
    }
}
