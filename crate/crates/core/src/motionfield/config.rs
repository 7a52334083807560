use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

use super::FieldError;

/// Multi-resolution hash encoding hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashEncodingConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Rows per level table; a power of two no larger than 2³².
    pub table_size: usize,
    pub base_resolution: u32,
    pub growth: f64,
    pub primes: [u32; 3],
}

impl Default for HashEncodingConfig {
    fn default() -> Self {
        HashEncodingConfig {
            levels: 16,
            features_per_level: 4,
            table_size: 1 << 19,
            base_resolution: 16,
            growth: 1.5,
            primes: [1, 2_654_435_761, 805_459_861],
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl HashEncodingConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |msg: String| Err(FieldError::InvalidConfig(msg));
        if self.levels == 0 || self.features_per_level == 0 {
            return bad(format!("levels {} / features {}", self.levels, self.features_per_level));
        }
        if !self.table_size.is_power_of_two() || self.table_size as u64 > 1 << 32 {
            return bad(format!("table size {} is not a power of two ≤ 2^32", self.table_size));
        }
        if !(self.growth > 1.0) || self.base_resolution == 0 {
            return bad(format!("growth {} / base resolution {}", self.growth, self.base_resolution));
        }
        let [a, b, c] = self.primes.map(u64::from);
        if gcd(a, b) != 1 || gcd(b, c) != 1 || gcd(a, c) != 1 {
            return bad(format!("primes {:?} are not pairwise coprime", self.primes));
        }
        Ok(())
    }

    /// Grid resolution `⌊base · growthˡ⌋` of a level.
    pub fn level_resolution(&self, level: usize) -> u32 {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as u32
    }

    /// Levels whose `(N+1)³` lattice fits the table are indexed densely.
    pub fn is_dense_level(&self, level: usize) -> bool {
        let side = self.level_resolution(level) as u128 + 1;
        side * side * side <= self.table_size as u128
    }

    pub fn feature_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn embedding_len(&self) -> usize {
        self.levels * self.table_size * self.features_per_level
    }
}

/// Encoding plus regressor architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: HashEncodingConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Relative inflation of the fitted normalization half-extent.
    pub box_margin: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding: HashEncodingConfig::default(),
            hidden_width: 64,
            hidden_layers: 2,
            box_margin: 0.05,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        self.encoding.validate()?;
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(FieldError::InvalidConfig(format!(
                "regressor {}x{}",
                self.hidden_layers, self.hidden_width
            )));
        }
        if !(self.box_margin >= 0.0) {
            return Err(FieldError::InvalidConfig(format!("box margin {}", self.box_margin)));
        }
        Ok(())
    }
}

pub const MIN_HALF_EXTENT: f64 = 1e-6;

/// Maps world positions into the unit cube seen by the encoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationBox {
    pub center: Vec3,
    pub half_extent: Vec3,
}

impl Default for NormalizationBox {
    fn default() -> Self {
        NormalizationBox { center: Vec3::zeros(), half_extent: Vec3::repeat(1.0) }
    }
}

impl NormalizationBox {
    /// `((x − c) / b + 1) / 2`, so the box maps onto `[0, 1]³`.
    pub fn normalize(&self, x: &Vec3) -> [f64; 3] {
        let mut u = [0.0; 3];
        for k in 0..3 {
            u[k] = ((x[k] - self.center[k]) / self.half_extent[k] + 1.0) * 0.5;
        }
        u
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|k| (x[k] - self.center[k]).abs() <= self.half_extent[k])
    }
}

/// Bounding-box center and margin-inflated half-extent, floored per axis.
pub fn fit_normalization(positions: &[Vec3], margin: f64) -> Result<NormalizationBox, FieldError> {
    let first = positions.first().ok_or(FieldError::EmptySamples)?;
    let (mut lo, mut hi) = (*first, *first);
    for p in positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) * 0.5;
    let half_extent = ((hi - lo) * 0.5 * (1.0 + margin)).map(|b| b.max(MIN_HALF_EXTENT));
    Ok(NormalizationBox { center, half_extent })
}
