//! Spatial hashing and trilinear interpolation of the level tables.

use super::config::{HashEncodingConfig, NormalizationBox};
use crate::geometry::Vec3;

/// `(⊕ⱼ cellⱼ·πⱼ) mod T` with wrap-around 32-bit multiplication.
pub fn spatial_hash(cell: [i64; 3], primes: [u32; 3], table_size: usize) -> usize {
    let h = (cell[0] as u32).wrapping_mul(primes[0])
        ^ (cell[1] as u32).wrapping_mul(primes[1])
        ^ (cell[2] as u32).wrapping_mul(primes[2]);
    (h as u64 & (table_size as u64 - 1)) as usize
}

/// Row of `cell` in the table of `level`. Dense levels use the row-major
/// lattice id (wrapped into the table for cells outside the lattice); the
/// others use [`spatial_hash`].
pub fn hash_index(config: &HashEncodingConfig, level: usize, cell: [i64; 3]) -> usize {
    assert!(level < config.levels, "level {level} out of range");
    if config.is_dense_level(level) {
        let side = config.level_resolution(level) as i64 + 1;
        let id = cell[0].wrapping_add(side.wrapping_mul(cell[1].wrapping_add(side.wrapping_mul(cell[2]))));
        id.rem_euclid(config.table_size as i64) as usize
    } else {
        spatial_hash(cell, config.primes, config.table_size)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LevelPlan {
    resolution: f64,
    dense_side: Option<i64>,
}

/// Per-level constants hoisted out of the per-point loops.
#[derive(Debug, Clone)]
pub(crate) struct EncodingPlan {
    pub config: HashEncodingConfig,
    levels: Vec<LevelPlan>,
}

/// Table rows (global, `level · T + row`) and trilinear weights of the 8
/// corners of one level. Corner `c` offsets the base cell by
/// `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LevelCorners {
    pub rows: [u32; 8],
    pub weights: [f64; 8],
}

impl EncodingPlan {
    pub fn new(config: &HashEncodingConfig) -> Self {
        let levels = (0..config.levels)
            .map(|l| LevelPlan {
                resolution: config.level_resolution(l) as f64,
                dense_side: config.is_dense_level(l).then(|| config.level_resolution(l) as i64 + 1),
            })
            .collect();
        EncodingPlan { config: *config, levels }
    }

    #[inline]
    fn row(&self, level: usize, cell: [i64; 3]) -> usize {
        let t = self.config.table_size;
        match self.levels[level].dense_side {
            Some(side) => {
                let id =
                    cell[0].wrapping_add(side.wrapping_mul(cell[1].wrapping_add(side.wrapping_mul(cell[2]))));
                id.rem_euclid(t as i64) as usize
            }
            None => spatial_hash(cell, self.config.primes, t),
        }
    }

    /// Corners of `level` for a point already mapped into the unit cube.
    #[inline]
    pub fn corners(&self, level: usize, unit: &[f64; 3]) -> LevelCorners {
        let res = self.levels[level].resolution;
        let mut base = [0i64; 3];
        let mut frac = [0.0f64; 3];
        for k in 0..3 {
            let pos = unit[k] * res;
            let fl = pos.floor();
            base[k] = fl as i64;
            frac[k] = pos - fl;
        }
        let offset = (level * self.config.table_size) as u32;
        let mut out = LevelCorners::default();
        for c in 0..8 {
            let d = [(c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64];
            let cell = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
            out.rows[c] = offset + self.row(level, cell) as u32;
            let mut w = 1.0;
            for k in 0..3 {
                w *= if d[k] == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            out.weights[c] = w;
        }
        out
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }
}

/// Concatenated interpolated features of all levels, ascending level order.
pub(crate) fn encode_with(
    plan: &EncodingPlan,
    bbox: &NormalizationBox,
    embeddings: &[f32],
    x: &Vec3,
) -> Vec<f64> {
    let f = plan.config.features_per_level;
    let unit = bbox.normalize(x);
    let mut out = vec![0.0; plan.config.feature_dim()];
    for level in 0..plan.levels() {
        let corners = plan.corners(level, &unit);
        for c in 0..8 {
            let row = corners.rows[c] as usize * f;
            for j in 0..f {
                out[level * f + j] += corners.weights[c] * embeddings[row + j] as f64;
            }
        }
    }
    out
}

/// [`encode_with`] written into a single-precision feature row.
pub(crate) fn encode_into(
    plan: &EncodingPlan,
    bbox: &NormalizationBox,
    embeddings: &[f32],
    x: &Vec3,
    out: &mut [f32],
) {
    let f = plan.config.features_per_level;
    let unit = bbox.normalize(x);
    const LANES: usize = 16;
    let mut acc = [0.0f64; LANES];
    for level in 0..plan.levels() {
        let corners = plan.corners(level, &unit);
        for (start, chunk) in (0..f).step_by(LANES).map(|s| (s, (f - s).min(LANES))) {
            acc[..chunk].fill(0.0);
            for c in 0..8 {
                let row = corners.rows[c] as usize * f + start;
                for j in 0..chunk {
                    acc[j] += corners.weights[c] * embeddings[row + j] as f64;
                }
            }
            for j in 0..chunk {
                out[level * f + start + j] = acc[j] as f32;
            }
        }
    }
}
