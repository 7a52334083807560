//! Field checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      "SDMF"
//! version    u32
//! encoding   levels u32, features u32, table_size u64, base_resolution u32,
//!            growth f64, primes 3×u32
//! regressor  hidden_width u32, hidden_layers u32, box_margin f64
//! box        fitted u8, center 3×f64, half_extent 3×f64
//! field      version u64, parameter count u64
//! params     count × f32 in the ParamLayout order
//! checksum   u64 FNV-1a of every preceding byte
//! ```

use std::path::Path;

use thiserror::Error;

use super::config::{FieldConfig, HashEncodingConfig, NormalizationBox};
use super::field::MotionField;
use crate::geometry::Vec3;
use crate::wire::{fnv1a64, Reader, ShortRead, Writer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SDMF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a field checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: needs {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

impl From<ShortRead> for CheckpointError {
    fn from(e: ShortRead) -> Self {
        CheckpointError::Truncated { needed: e.needed, available: e.available }
    }
}

pub fn write_checkpoint(field: &MotionField, w: &mut Writer) {
    let start = w.buf.len();
    let c = field.config();
    let e = &c.encoding;
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(e.levels as u32);
    w.u32(e.features_per_level as u32);
    w.u64(e.table_size as u64);
    w.u32(e.base_resolution);
    w.f64(e.growth);
    for p in e.primes {
        w.u32(p);
    }
    w.u32(c.hidden_width as u32);
    w.u32(c.hidden_layers as u32);
    w.f64(c.box_margin);
    w.u8(field.box_fitted() as u8);
    for v in field.bbox().center.iter().chain(field.bbox().half_extent.iter()) {
        w.f64(*v);
    }
    w.u64(field.version());
    w.u64(field.params().len() as u64);
    w.f32s(field.params());
    let sum = fnv1a64(&w.buf[start..]);
    w.u64(sum);
}

/// Parses one checkpoint from the front of `data`; returns the field and the
/// number of bytes consumed.
pub fn read_checkpoint(data: &[u8]) -> Result<(MotionField, usize), CheckpointError> {
    let mut r = Reader::new(data);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let levels = r.u32()? as usize;
    let features_per_level = r.u32()? as usize;
    let table_size = r.u64()? as usize;
    let base_resolution = r.u32()?;
    let growth = r.f64()?;
    let primes = [r.u32()?, r.u32()?, r.u32()?];
    let hidden_width = r.u32()? as usize;
    let hidden_layers = r.u32()? as usize;
    let box_margin = r.f64()?;
    let fitted = r.u8()? != 0;
    let center = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let half_extent = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let field_version = r.u64()?;
    let count = r.u64()? as usize;
    let body = r.position();
    let end = body.saturating_add(count.saturating_mul(4));
    if end.saturating_add(8) > data.len() {
        return Err(CheckpointError::Truncated { needed: end.saturating_add(8), available: data.len() });
    }
    let params = r.f32s(count)?;
    let stored = r.u64()?;
    let computed = fnv1a64(&data[..end]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let encoding =
        HashEncodingConfig { levels, features_per_level, table_size, base_resolution, growth, primes };
    let config = FieldConfig { encoding, hidden_width, hidden_layers, box_margin };
    if !(half_extent.iter().all(|&b| b > 0.0 && b.is_finite()) && center.iter().all(|c| c.is_finite())) {
        return Err(CheckpointError::Invalid(format!("normalization box {center:?} / {half_extent:?}")));
    }
    let bbox = NormalizationBox { center, half_extent };
    let field = MotionField::from_parts(config, bbox, fitted, params, field_version)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    Ok((field, r.position()))
}

impl MotionField {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = Writer::default();
        write_checkpoint(self, &mut w);
        std::fs::write(path, &w.buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MotionField, CheckpointError> {
        let data = std::fs::read(path)?;
        let (field, used) = read_checkpoint(&data)?;
        if used != data.len() {
            return Err(CheckpointError::Invalid(format!("{} trailing bytes", data.len() - used)));
        }
        Ok(field)
    }
}
