//! Parameter storage, regressor forward/backward and queries.

use std::fmt;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{FieldConfig, NormalizationBox};
use super::encoding::{encode_into, encode_with, EncodingPlan};
use super::FieldError;
use crate::geometry::Vec3;
use crate::VelocityField;

pub const EMBEDDING_INIT_RANGE: f32 = 1e-4;
const QUERY_CHUNK: usize = 1024;

/// Offsets of one dense layer inside the flat parameter vector. The weight
/// block is `fan_out × fan_in`, row-major, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Flat parameter order: embedding tables (level-major, `T` rows of `F`
/// features each), then every layer's weights and biases from input to head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub embedding_len: usize,
    pub layers: Vec<LayerSlot>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(config: &FieldConfig) -> Self {
        let embedding_len = config.encoding.embedding_len();
        let mut offset = embedding_len;
        let mut fan_in = config.encoding.feature_dim();
        let mut layers = Vec::with_capacity(config.hidden_layers + 1);
        for i in 0..=config.hidden_layers {
            let fan_out = if i == config.hidden_layers { 3 } else { config.hidden_width };
            layers.push(LayerSlot {
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            offset += fan_in * fan_out + fan_out;
            fan_in = fan_out;
        }
        ParamLayout { embedding_len, layers, total: offset }
    }

    pub fn head(&self) -> &LayerSlot {
        self.layers.last().expect("at least the head layer")
    }
}

/// Continuous velocity field. Cloning is O(1): parameters are shared and
/// copied on write, so a clone is an immutable snapshot of this version.
#[derive(Clone)]
pub struct MotionField {
    config: FieldConfig,
    bbox: NormalizationBox,
    box_fitted: bool,
    params: Arc<Vec<f32>>,
    version: u64,
    layout: Arc<ParamLayout>,
    plan: Arc<EncodingPlan>,
}

impl fmt::Debug for MotionField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MotionField")
            .field("config", &self.config)
            .field("bbox", &self.bbox)
            .field("box_fitted", &self.box_fitted)
            .field("params", &self.params.len())
            .field("version", &self.version)
            .finish()
    }
}

impl MotionField {
    /// Fresh field: uniform small embeddings, He-normal hidden layers, zero
    /// biases and a zero head, so every query returns zero motion.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = Uniform::new_inclusive(-EMBEDDING_INIT_RANGE, EMBEDDING_INIT_RANGE).expect("finite range");
        for p in &mut params[..layout.embedding_len] {
            *p = init.sample(&mut rng);
        }
        for slot in &layout.layers[..layout.layers.len() - 1] {
            let he = Normal::new(0.0, (2.0 / slot.fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[slot.weight_offset..slot.bias_offset] {
                *p = he.sample(&mut rng) as f32;
            }
        }
        Ok(Self::assemble(config, NormalizationBox::default(), false, params, 0, layout))
    }

    pub(crate) fn from_parts(
        config: FieldConfig,
        bbox: NormalizationBox,
        box_fitted: bool,
        params: Vec<f32>,
        version: u64,
    ) -> Result<Self, FieldError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(FieldError::InvalidConfig(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self::assemble(config, bbox, box_fitted, params, version, layout))
    }

    fn assemble(
        config: FieldConfig,
        bbox: NormalizationBox,
        box_fitted: bool,
        params: Vec<f32>,
        version: u64,
        layout: ParamLayout,
    ) -> Self {
        let plan = EncodingPlan::new(&config.encoding);
        MotionField {
            config,
            bbox,
            box_fitted,
            params: Arc::new(params),
            version,
            layout: Arc::new(layout),
            plan: Arc::new(plan),
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn bbox(&self) -> &NormalizationBox {
        &self.bbox
    }

    /// Whether the box has been fitted to samples (false until first training).
    pub fn box_fitted(&self) -> bool {
        self.box_fitted
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// O(1) immutable copy of the current version.
    pub fn snapshot(&self) -> MotionField {
        self.clone()
    }

    /// Overwrites parameters, e.g. for externally set weights in tests or tools.
    pub fn set_params(&mut self, params: Vec<f32>) -> Result<(), FieldError> {
        if params.len() != self.layout.total {
            return Err(FieldError::InvalidConfig(format!(
                "{} parameters for a layout of {}",
                params.len(),
                self.layout.total
            )));
        }
        self.params = Arc::new(params);
        self.version += 1;
        Ok(())
    }

    pub fn set_bbox(&mut self, bbox: NormalizationBox) {
        self.bbox = bbox;
        self.box_fitted = true;
    }

    pub(crate) fn commit(&mut self, bbox: NormalizationBox, params: Option<Vec<f32>>) {
        self.bbox = bbox;
        self.box_fitted = true;
        if let Some(p) = params {
            self.params = Arc::new(p);
        }
        self.version += 1;
    }

    pub(crate) fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    pub(crate) fn plan(&self) -> &EncodingPlan {
        &self.plan
    }

    /// Interpolated multi-level features of `x` (length `L · F`).
    pub fn encode(&self, x: &Vec3) -> Vec<f64> {
        encode_with(&self.plan, &self.bbox, &self.params[..self.layout.embedding_len], x)
    }

    pub fn query(&self, x: &Vec3) -> Vec3 {
        self.query_batch(std::slice::from_ref(x))[0]
    }

    /// Batched queries; the cost per point depends only on the configuration.
    pub fn query_batch(&self, xs: &[Vec3]) -> Vec<Vec3> {
        let dim = self.config.encoding.feature_dim();
        let embeddings = &self.params[..self.layout.embedding_len];
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(QUERY_CHUNK) {
            let mut features = Array2::<f32>::zeros((chunk.len(), dim));
            for (x, mut row) in chunk.iter().zip(features.rows_mut()) {
                encode_into(
                    &self.plan,
                    &self.bbox,
                    embeddings,
                    x,
                    row.as_slice_mut().expect("contiguous row"),
                );
            }
            let acts = forward(&self.layout, &self.params, features);
            let head = acts.last().expect("head output");
            out.extend(head.rows().into_iter().map(|r| Vec3::new(r[0] as f64, r[1] as f64, r[2] as f64)));
        }
        out
    }
}

impl VelocityField for MotionField {
    fn velocity(&self, x: &Vec3) -> Vec3 {
        self.query(x)
    }

    fn velocities(&self, xs: &[Vec3]) -> Vec<Vec3> {
        self.query_batch(xs)
    }
}

fn weight_view<'a>(params: &'a [f32], slot: &LayerSlot) -> ArrayView2<'a, f32> {
    ArrayView2::from_shape((slot.fan_out, slot.fan_in), &params[slot.weight_offset..slot.bias_offset])
        .expect("layer shape matches layout")
}

/// Activations of every layer: `[input, hidden…, head]`. Hidden layers are
/// rectified, the head is linear.
pub(crate) fn forward(layout: &ParamLayout, params: &[f32], input: Array2<f32>) -> Vec<Array2<f32>> {
    let n = input.nrows();
    let depth = layout.layers.len();
    let mut acts = Vec::with_capacity(depth + 1);
    acts.push(input);
    for (i, slot) in layout.layers.iter().enumerate() {
        let bias = &params[slot.bias_offset..slot.bias_offset + slot.fan_out];
        let mut z = Array2::zeros((n, slot.fan_out));
        general_mat_mul(1.0, &acts[i], &weight_view(params, slot).t(), 0.0, &mut z);
        let rectify = i + 1 < depth;
        for row in z.as_slice_mut().expect("standard layout").chunks_exact_mut(slot.fan_out) {
            for (v, b) in row.iter_mut().zip(bias) {
                let s = *v + b;
                *v = if rectify && !(s > 0.0) { 0.0 } else { s };
            }
        }
        acts.push(z);
    }
    acts
}

/// Adds the regressor parameter gradients into `grad` and returns the
/// gradient with respect to the input features.
pub(crate) fn backward(
    layout: &ParamLayout,
    params: &[f32],
    acts: &[Array2<f32>],
    d_out: Array2<f32>,
    grad: &mut [f32],
) -> Array2<f32> {
    let mut delta = d_out;
    for (i, slot) in layout.layers.iter().enumerate().rev() {
        let a_in = &acts[i];
        {
            let mut gw = ArrayViewMut2::from_shape(
                (slot.fan_out, slot.fan_in),
                &mut grad[slot.weight_offset..slot.bias_offset],
            )
            .expect("layer shape matches layout");
            general_mat_mul(1.0, &delta.t(), a_in, 1.0, &mut gw);
        }
        let gb = delta.sum_axis(Axis(0));
        for (g, d) in grad[slot.bias_offset..slot.bias_offset + slot.fan_out].iter_mut().zip(gb.iter()) {
            *g += d;
        }
        let mut d_in = delta.dot(&weight_view(params, slot));
        if i > 0 {
            d_in.zip_mut_with(a_in, |d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        }
        delta = d_in;
    }
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motionfield::HashEncodingConfig;
    use rand::Rng;

    fn tiny() -> FieldConfig {
        FieldConfig {
            encoding: HashEncodingConfig { levels: 2, table_size: 16, ..Default::default() },
            hidden_width: 8,
            ..Default::default()
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let c = FieldConfig::default();
        let l = ParamLayout::new(&c);
        assert_eq!(l.embedding_len, 16 * (1 << 19) * 4);
        assert_eq!(l.layers.len(), 3);
        assert_eq!(l.layers[0].weight_offset, l.embedding_len);
        assert_eq!((l.layers[0].fan_in, l.layers[0].fan_out), (64, 64));
        assert_eq!((l.head().fan_in, l.head().fan_out), (64, 3));
        assert_eq!(l.total, l.embedding_len + (64 * 64 + 64) * 2 + 64 * 3 + 3);
    }

    #[test]
    fn fresh_field_predicts_zero() {
        let f = MotionField::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            assert_eq!(f.query(&x), Vec3::zeros());
        }
    }

    #[test]
    fn init_respects_ranges() {
        let f = MotionField::new(tiny(), 9).unwrap();
        let l = f.layout().clone();
        assert!(f.params()[..l.embedding_len].iter().all(|p| p.abs() <= EMBEDDING_INIT_RANGE));
        assert!(f.params()[l.head().weight_offset..].iter().all(|&p| p == 0.0));
        let hidden = &f.params()[l.layers[0].weight_offset..l.layers[0].bias_offset];
        assert!(hidden.iter().any(|&p| p != 0.0));
        assert!(f.params()[l.layers[0].bias_offset..l.layers[1].weight_offset].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        let a = MotionField::new(tiny(), 5).unwrap();
        let b = MotionField::new(tiny(), 5).unwrap();
        let c = MotionField::new(tiny(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    fn randomized(config: FieldConfig, seed: u64) -> MotionField {
        let mut f = MotionField::new(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let p: Vec<f32> = (0..f.layout().total).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        f.set_params(p).unwrap();
        f
    }

    /// Encoding oracle: evaluates every corner explicitly in f64.
    fn naive_encode(f: &MotionField, x: &Vec3) -> Vec<f64> {
        let c = f.config().encoding;
        let b = f.bbox();
        let mut out = Vec::new();
        for level in 0..c.levels {
            let n = (c.base_resolution as f64 * c.growth.powi(level as i32)).floor();
            let g: Vec<f64> =
                (0..3).map(|k| ((x[k] - b.center[k]) / b.half_extent[k] + 1.0) / 2.0 * n).collect();
            let mut feat = vec![0.0; c.features_per_level];
            for dx in 0..2i64 {
                for dy in 0..2i64 {
                    for dz in 0..2i64 {
                        let cell =
                            [g[0].floor() as i64 + dx, g[1].floor() as i64 + dy, g[2].floor() as i64 + dz];
                        let mut w = 1.0;
                        for (k, d) in [dx, dy, dz].into_iter().enumerate() {
                            let t = g[k] - g[k].floor();
                            w *= if d == 1 { t } else { 1.0 - t };
                        }
                        let row = level * c.table_size + crate::motionfield::hash_index(&c, level, cell);
                        for j in 0..c.features_per_level {
                            feat[j] += w * f.params()[row * c.features_per_level + j] as f64;
                        }
                    }
                }
            }
            out.extend(feat);
        }
        out
    }

    #[test]
    fn encode_matches_naive_oracle() {
        let cfg = FieldConfig {
            encoding: HashEncodingConfig { levels: 6, table_size: 1 << 10, ..Default::default() },
            ..tiny()
        };
        let mut f = randomized(cfg, 1);
        f.set_bbox(NormalizationBox {
            center: Vec3::new(1.0, 2.0, -1.0),
            half_extent: Vec3::new(2.0, 0.5, 3.0),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let x = Vec3::new(
                rng.random_range(-2.0..4.0),
                rng.random_range(1.0..3.0),
                rng.random_range(-5.0..3.0),
            );
            let a = f.encode(&x);
            let b = naive_encode(&f, &x);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn corner_and_center_features() {
        let f = randomized(tiny(), 2);
        let c = f.config().encoding;
        let n = c.level_resolution(1) as f64;
        let cell = [3i64, 7, 2];
        // Default box maps [-1, 1]³ onto the unit cube.
        let corner = Vec3::from_iterator(cell.iter().map(|&k| k as f64 / n * 2.0 - 1.0));
        let feat = f.encode(&corner);
        let row = c.table_size + crate::motionfield::hash_index(&c, 1, cell);
        for j in 0..4 {
            assert!((feat[4 + j] - f.params()[row * 4 + j] as f64).abs() < 1e-12);
        }
        let center = Vec3::from_iterator(cell.iter().map(|&k| (k as f64 + 0.5) / n * 2.0 - 1.0));
        let feat = f.encode(&center);
        for j in 0..4 {
            let mut mean = 0.0;
            for d in 0..8 {
                let cc = [cell[0] + (d & 1), cell[1] + ((d >> 1) & 1), cell[2] + ((d >> 2) & 1)];
                mean += f.params()[(c.table_size + crate::motionfield::hash_index(&c, 1, cc)) * 4 + j] as f64
                    / 8.0;
            }
            assert!((feat[4 + j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_and_single_queries_agree() {
        let f = randomized(tiny(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec3> = (0..2500).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
        let batch = f.query_batch(&xs);
        for (x, v) in xs.iter().zip(&batch).step_by(97) {
            assert_eq!(f.query(x), *v);
        }
    }

    #[test]
    fn query_is_continuous() {
        let f = randomized(tiny(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let d = Vec3::new(1.0, -1.0, 1.0).normalize() * 1e-6;
            // Lipschitz bound of the encoder times the regressor norm, with f32 rounding slack.
            assert!((f.query(&(x + d)) - f.query(&x)).norm() < 1e-3);
        }
    }

    #[test]
    fn out_of_box_queries_are_finite() {
        let f = randomized(tiny(), 8);
        for x in [Vec3::repeat(1e6), Vec3::repeat(-1e6), Vec3::new(1e9, -3.0, 0.0)] {
            assert!(f.query(&x).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn snapshot_is_isolated_from_updates() {
        let mut f = randomized(tiny(), 12);
        let snap = f.snapshot();
        let x = Vec3::new(0.1, 0.2, 0.3);
        let before = snap.query(&x);
        let zeros = vec![0.0; f.layout().total];
        f.set_params(zeros).unwrap();
        assert_eq!(f.query(&x), Vec3::zeros());
        assert_eq!(snap.query(&x), before);
        assert!(f.version() > snap.version());
    }
}
