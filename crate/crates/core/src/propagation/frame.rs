//! Binary frame record streamed to viewers and written by frame export.
//!
//! Little-endian, 40-byte header followed by the payload:
//!
//! ```text
//! 0   magic          "SDFR"
//! 4   version        u16
//! 6   flags          u16   bit 0: colors present, bit 1: bidirectional layers
//! 8   sequence       u64   per-stream counter, strictly increasing
//! 16  field_version  u64
//! 24  frame_index    u32   t in 0..=horizon
//! 28  horizon        u32
//! 32  count          u32   points in the record
//! 36  static_count   u32   leading static points
//! 40  positions      count × 3 × f32
//!     opacities      count × f32
//!     colors         count × 3 × f32 (flag bit 0 only)
//! ```
//!
//! Points after the static block are the forward copies; with bit 1 set the
//! dynamic block splits evenly into forward then backward copies.

use thiserror::Error;

use super::RenderSet;
use crate::wire::{Reader, ShortRead, Writer};

pub const FRAME_MAGIC: [u8; 4] = *b"SDFR";
pub const FRAME_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 40;
pub const FRAME_FLAG_COLORS: u16 = 1;
pub const FRAME_FLAG_BIDIRECTIONAL: u16 = 2;
const KNOWN_FLAGS: u16 = FRAME_FLAG_COLORS | FRAME_FLAG_BIDIRECTIONAL;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("not a frame record (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("frame record version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("frame record truncated: needs {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("frame record has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid frame record: {0}")]
    Invalid(String),
}

impl From<ShortRead> for FrameError {
    fn from(e: ShortRead) -> Self {
        FrameError::Truncated { needed: e.needed, available: e.available }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub sequence: u64,
    pub field_version: u64,
    pub frame_index: u32,
    pub horizon: u32,
    pub static_count: u32,
    pub bidirectional: bool,
    pub positions: Vec<[f32; 3]>,
    pub opacities: Vec<f32>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl FrameRecord {
    pub fn from_render_set(
        frame: &RenderSet,
        frame_index: usize,
        horizon: usize,
        sequence: u64,
        field_version: u64,
    ) -> Self {
        FrameRecord {
            sequence,
            field_version,
            frame_index: frame_index as u32,
            horizon: horizon as u32,
            static_count: frame.static_count as u32,
            bidirectional: frame.backward_count > 0,
            positions: frame.positions.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
            opacities: frame.opacities.iter().map(|&a| a as f32).collect(),
            colors: frame.colors.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn flags(&self) -> u16 {
        let mut f = 0;
        if self.colors.is_some() {
            f |= FRAME_FLAG_COLORS;
        }
        if self.bidirectional {
            f |= FRAME_FLAG_BIDIRECTIONAL;
        }
        f
    }

    pub fn encoded_len(&self) -> usize {
        let per_point = if self.colors.is_some() { 28 } else { 16 };
        FRAME_HEADER_LEN + per_point * self.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::with_capacity(self.encoded_len()) };
        w.bytes(&FRAME_MAGIC);
        w.u16(FRAME_VERSION);
        w.u16(self.flags());
        w.u64(self.sequence);
        w.u64(self.field_version);
        w.u32(self.frame_index);
        w.u32(self.horizon);
        w.u32(self.len() as u32);
        w.u32(self.static_count);
        for p in &self.positions {
            w.f32s(p);
        }
        w.f32s(&self.opacities);
        if let Some(colors) = &self.colors {
            for c in colors {
                w.f32s(c);
            }
        }
        w.buf
    }

    pub fn decode(data: &[u8]) -> Result<Self, FrameError> {
        let mut r = Reader::new(data);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != FRAME_MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != FRAME_VERSION {
            return Err(FrameError::VersionMismatch { found: version, expected: FRAME_VERSION });
        }
        let flags = r.u16()?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(FrameError::Invalid(format!("unknown flags {flags:#06x}")));
        }
        let sequence = r.u64()?;
        let field_version = r.u64()?;
        let frame_index = r.u32()?;
        let horizon = r.u32()?;
        let count = r.u32()? as usize;
        let static_count = r.u32()?;
        let bidirectional = flags & FRAME_FLAG_BIDIRECTIONAL != 0;
        if frame_index > horizon {
            return Err(FrameError::Invalid(format!("frame {frame_index} beyond horizon {horizon}")));
        }
        if static_count as usize > count {
            return Err(FrameError::Invalid(format!("{static_count} static points of {count}")));
        }
        if bidirectional && (count - static_count as usize) % 2 != 0 {
            return Err(FrameError::Invalid("odd dynamic block in a bidirectional frame".into()));
        }
        let per_point = if flags & FRAME_FLAG_COLORS != 0 { 28 } else { 16 };
        let needed = FRAME_HEADER_LEN + per_point * count;
        if data.len() < needed {
            return Err(FrameError::Truncated { needed, available: data.len() });
        }
        if data.len() > needed {
            return Err(FrameError::TrailingBytes(data.len() - needed));
        }
        let triples = |v: Vec<f32>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let positions = triples(r.f32s(3 * count)?);
        let opacities = r.f32s(count)?;
        let colors = if flags & FRAME_FLAG_COLORS != 0 { Some(triples(r.f32s(3 * count)?)) } else { None };
        Ok(FrameRecord {
            sequence,
            field_version,
            frame_index,
            horizon,
            static_count,
            bidirectional,
            positions,
            opacities,
            colors,
        })
    }
}
