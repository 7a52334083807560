//! Full-batch Adam on the mean squared flow residual.

use ndarray::Array2;

use super::config::{fit_normalization, NormalizationBox};
use super::encoding::EncodingPlan;
use super::field::{backward, forward, MotionField, ParamLayout};
use super::FieldError;
use crate::alignment::FlowSampleSet;
use crate::geometry::Vec3;

/// Reported in [`TrainReport`]: the objective is averaged, not summed, over samples.
pub const LOSS_NORMALIZATION: &str = "mean";
const TRAIN_CHUNK: usize = 1024;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Seeds re-initialization on a cold start; full-batch steps draw nothing.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { iterations: 100, learning_rate: 1e-2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub iterations: usize,
    pub samples: usize,
    /// Loss before each step; `loss_curve.len() == iterations`.
    pub loss_curve: Vec<f64>,
    /// Loss of the committed parameters.
    pub final_loss: f64,
    pub box_refit: bool,
    /// Set when the run ended above its starting loss and the starting
    /// parameters were kept instead.
    pub reverted: bool,
    pub loss_normalization: &'static str,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.loss_curve.first().copied().unwrap_or(self.final_loss)
    }
}

/// Global table rows and trilinear weights of every (level, sample, corner),
/// level-major so that each pass touches a single level's table.
struct CornerTable {
    samples: usize,
    rows: Vec<u32>,
    weights: Vec<f32>,
}

impl CornerTable {
    fn build(plan: &EncodingPlan, bbox: &NormalizationBox, positions: &[Vec3]) -> Self {
        let (levels, n) = (plan.levels(), positions.len());
        let mut rows = vec![0u32; levels * n * 8];
        let mut weights = vec![0f32; levels * n * 8];
        for (s, x) in positions.iter().enumerate() {
            let unit = bbox.normalize(x);
            for level in 0..levels {
                let c = plan.corners(level, &unit);
                let base = (level * n + s) * 8;
                rows[base..base + 8].copy_from_slice(&c.rows);
                for k in 0..8 {
                    weights[base + k] = c.weights[k] as f32;
                }
            }
        }
        CornerTable { samples: n, rows, weights }
    }

    fn levels(&self) -> usize {
        self.rows.len() / (8 * self.samples)
    }

    /// Corner rows and weights of samples `start..end` at `level`.
    fn slice(&self, level: usize, start: usize, end: usize) -> (&[u32], &[f32]) {
        let (a, b) = ((level * self.samples + start) * 8, (level * self.samples + end) * 8);
        (&self.rows[a..b], &self.weights[a..b])
    }

    /// Sorted distinct rows referenced by any sample.
    fn touched_rows(&self, total_rows: usize) -> Vec<u32> {
        let mut seen = vec![false; total_rows];
        for &r in &self.rows {
            seen[r as usize] = true;
        }
        seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i as u32).collect()
    }
}

/// Spreads the low 21 bits of `v` three positions apart.
fn spread_bits(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | x << 32) & 0x001f_0000_0000_ffff;
    x = (x | x << 16) & 0x001f_0000_ff00_00ff;
    x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
    x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
    x = (x | x << 2) & 0x1249_2492_4924_9249;
    x
}

/// Sample order along a Z-curve of the normalized positions, which keeps the
/// coarse-level rows of consecutive samples shared.
fn morton_order(bbox: &NormalizationBox, positions: &[Vec3]) -> Vec<usize> {
    let scale = ((1u64 << 21) - 1) as f64;
    let codes: Vec<u64> = positions
        .iter()
        .map(|p| {
            let u = bbox.normalize(p);
            (0..3).fold(0, |acc, k| acc | spread_bits((u[k].clamp(0.0, 1.0) * scale) as u64) << k)
        })
        .collect();
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by_key(|&i| (codes[i], i));
    order
}

const PREFETCH_AHEAD: usize = 8 * 16;

#[inline(always)]
fn prefetch(data: &[f32], rows: &[u32], at: usize, f: usize) {
    #[cfg(target_arch = "x86_64")]
    if let Some(&r) = rows.get(at) {
        // SAFETY: prefetching never faults; the address stays inside `data`.
        unsafe {
            use std::arch::x86_64::{_mm_prefetch, _MM_HINT_T0};
            _mm_prefetch::<_MM_HINT_T0>(data.as_ptr().add((r as usize * f).min(data.len() - 1)) as *const i8);
        }
    }
}

fn gather<const F: usize>(emb: &[f32], rows: &[u32], weights: &[f32], x: &mut [f32], dim: usize, col: usize) {
    for (i, (r8, w8)) in rows.chunks_exact(8).zip(weights.chunks_exact(8)).enumerate() {
        for k in 0..8 {
            prefetch(emb, rows, i * 8 + PREFETCH_AHEAD + k, F);
        }
        let mut acc = [0f32; F];
        for (&r, &w) in r8.iter().zip(w8) {
            let e = &emb[r as usize * F..r as usize * F + F];
            for j in 0..F {
                acc[j] += w * e[j];
            }
        }
        x[i * dim + col..i * dim + col + F].copy_from_slice(&acc);
    }
}

fn scatter<const F: usize>(
    grad: &mut [f32],
    rows: &[u32],
    weights: &[f32],
    dx: &[f32],
    dim: usize,
    col: usize,
) {
    for (i, (r8, w8)) in rows.chunks_exact(8).zip(weights.chunks_exact(8)).enumerate() {
        for k in 0..8 {
            prefetch(grad, rows, i * 8 + PREFETCH_AHEAD + k, F);
        }
        let d: [f32; F] = dx[i * dim + col..i * dim + col + F].try_into().expect("F features");
        for (&r, &w) in r8.iter().zip(w8) {
            let g = &mut grad[r as usize * F..r as usize * F + F];
            for j in 0..F {
                g[j] += w * d[j];
            }
        }
    }
}

fn gather_dyn(f: usize, emb: &[f32], rows: &[u32], weights: &[f32], x: &mut [f32], dim: usize, col: usize) {
    for (i, (r8, w8)) in rows.chunks_exact(8).zip(weights.chunks_exact(8)).enumerate() {
        for (&r, &w) in r8.iter().zip(w8) {
            for j in 0..f {
                x[i * dim + col + j] += w * emb[r as usize * f + j];
            }
        }
    }
}

fn scatter_dyn(
    f: usize,
    grad: &mut [f32],
    rows: &[u32],
    weights: &[f32],
    dx: &[f32],
    dim: usize,
    col: usize,
) {
    for (i, (r8, w8)) in rows.chunks_exact(8).zip(weights.chunks_exact(8)).enumerate() {
        for (&r, &w) in r8.iter().zip(w8) {
            for j in 0..f {
                grad[r as usize * f + j] += w * dx[i * dim + col + j];
            }
        }
    }
}

/// Mean loss over all samples; when `grad` is given, its gradient is added to it.
fn evaluate(
    layout: &ParamLayout,
    features: usize,
    params: &[f32],
    corners: &CornerTable,
    targets: &[Vec3],
    mut grad: Option<&mut [f32]>,
) -> f64 {
    let n = targets.len();
    let levels = corners.levels();
    let dim = levels * features;
    let embeddings = &params[..layout.embedding_len];
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    for start in (0..n).step_by(TRAIN_CHUNK) {
        let end = (start + TRAIN_CHUNK).min(n);
        let mut x = Array2::<f32>::zeros((end - start, dim));
        let xs = x.as_slice_mut().expect("standard layout");
        for level in 0..levels {
            let (rows, weights) = corners.slice(level, start, end);
            let col = level * features;
            match features {
                2 => gather::<2>(embeddings, rows, weights, xs, dim, col),
                4 => gather::<4>(embeddings, rows, weights, xs, dim, col),
                8 => gather::<8>(embeddings, rows, weights, xs, dim, col),
                f => gather_dyn(f, embeddings, rows, weights, xs, dim, col),
            }
        }
        let acts = forward(layout, params, x);
        let out = acts.last().expect("head output");
        let mut d_out = Array2::<f32>::zeros(out.raw_dim());
        for (i, s) in (start..end).enumerate() {
            for k in 0..3 {
                let r = out[[i, k]] as f64 - targets[s][k];
                loss += r * r;
                d_out[[i, k]] = (2.0 * r * scale) as f32;
            }
        }
        let Some(g) = grad.as_deref_mut() else { continue };
        let d_x = backward(layout, params, &acts, d_out, g);
        let dxs = d_x.as_slice().expect("standard layout");
        for level in 0..levels {
            let (rows, weights) = corners.slice(level, start, end);
            let col = level * features;
            match features {
                2 => scatter::<2>(g, rows, weights, dxs, dim, col),
                4 => scatter::<4>(g, rows, weights, dxs, dim, col),
                8 => scatter::<8>(g, rows, weights, dxs, dim, col),
                f => scatter_dyn(f, g, rows, weights, dxs, dim, col),
            }
        }
    }
    loss * scale
}

/// Maximal runs `(first_row, rows)` of consecutive touched rows.
fn row_runs(touched: &[u32]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &r in touched {
        match runs.last_mut() {
            Some((first, len)) if *first + *len == r as usize => *len += 1,
            _ => runs.push((r as usize, 1)),
        }
    }
    runs
}

/// Adam moments for the regressor (dense) and for the touched embedding rows
/// (compact, in row order). Untouched rows have zero gradient for the whole
/// run, so their dense update would be exactly zero.
struct Adam {
    step: i32,
    m_mlp: Vec<f32>,
    v_mlp: Vec<f32>,
    m_emb: Vec<f32>,
    v_emb: Vec<f32>,
}

fn adam_update(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], lr: f32, inv_c1: f32, inv_c2: f32) {
    let (b1, b2, eps) = (BETA1 as f32, BETA2 as f32, EPSILON as f32);
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m * inv_c1) / ((*v * inv_c2).sqrt() + eps);
    }
}

impl Adam {
    fn new(mlp_len: usize, emb_len: usize) -> Self {
        Adam {
            step: 0,
            m_mlp: vec![0.0; mlp_len],
            v_mlp: vec![0.0; mlp_len],
            m_emb: vec![0.0; emb_len],
            v_emb: vec![0.0; emb_len],
        }
    }

    fn apply(
        &mut self,
        params: &mut [f32],
        grad: &[f32],
        layout: &ParamLayout,
        runs: &[(usize, usize)],
        f: usize,
        lr: f64,
    ) {
        self.step += 1;
        let inv_c1 = (1.0 / (1.0 - BETA1.powi(self.step))) as f32;
        let inv_c2 = (1.0 / (1.0 - BETA2.powi(self.step))) as f32;
        let lr = lr as f32;
        let e = layout.embedding_len;
        adam_update(&mut params[e..], &grad[e..], &mut self.m_mlp, &mut self.v_mlp, lr, inv_c1, inv_c2);
        let mut k = 0;
        for &(first, len) in runs {
            let (a, b) = (first * f, (first + len) * f);
            let (m, v) = (&mut self.m_emb[k..k + b - a], &mut self.v_emb[k..k + b - a]);
            adam_update(&mut params[a..b], &grad[a..b], m, v, lr, inv_c1, inv_c2);
            k += b - a;
        }
    }
}

fn check_samples(positions: &[Vec3], targets: &[Vec3]) -> Result<(), FieldError> {
    if positions.len() != targets.len() {
        return Err(FieldError::LengthMismatch { positions: positions.len(), targets: targets.len() });
    }
    if positions.is_empty() {
        return Err(FieldError::EmptySamples);
    }
    let bad =
        positions.iter().zip(targets).position(|(p, t)| !p.iter().chain(t.iter()).all(|v| v.is_finite()));
    match bad {
        Some(index) => Err(FieldError::NonFiniteSample { index }),
        None => Ok(()),
    }
}

impl MotionField {
    /// Mean squared residual `Σ‖F(xᵢ) − sᵢ‖² / N` under the current box.
    pub fn loss(&self, positions: &[Vec3], targets: &[Vec3]) -> Result<f64, FieldError> {
        check_samples(positions, targets)?;
        let corners = CornerTable::build(self.plan(), self.bbox(), positions);
        let f = self.config().encoding.features_per_level;
        Ok(evaluate(self.layout(), f, self.params(), &corners, targets, None))
    }

    /// Loss and its dense gradient over the flat parameter vector. Allocates
    /// a full-size gradient; meant for small configurations.
    pub fn loss_and_gradient(
        &self,
        positions: &[Vec3],
        targets: &[Vec3],
    ) -> Result<(f64, Vec<f32>), FieldError> {
        check_samples(positions, targets)?;
        let corners = CornerTable::build(self.plan(), self.bbox(), positions);
        let f = self.config().encoding.features_per_level;
        let mut grad = vec![0.0; self.layout().total];
        let loss = evaluate(self.layout(), f, self.params(), &corners, targets, Some(&mut grad));
        Ok((loss, grad))
    }

    /// Full-batch training. Fits the normalization box first if it has never
    /// been fitted. The field is left untouched on error.
    pub fn train(
        &mut self,
        samples: &FlowSampleSet,
        options: &TrainOptions,
    ) -> Result<TrainReport, FieldError> {
        self.fit(&samples.positions, &samples.vectors, options)
    }

    /// [`MotionField::train`] on raw position/velocity arrays.
    pub fn fit(
        &mut self,
        positions: &[Vec3],
        targets: &[Vec3],
        options: &TrainOptions,
    ) -> Result<TrainReport, FieldError> {
        check_samples(positions, targets)?;
        let (bbox, refit) = if self.box_fitted() {
            (*self.bbox(), false)
        } else {
            (fit_normalization(positions, self.config().box_margin)?, true)
        };
        self.run(positions, targets, bbox, refit, options)
    }

    /// Warm-started update on the accumulated set. The box is refit when the
    /// field has none yet or any sample lies strictly outside it; a cold start
    /// re-initializes the parameters from `options.seed` first.
    pub fn retrain_incremental(
        &mut self,
        samples: &FlowSampleSet,
        options: &TrainOptions,
        cold_start: bool,
    ) -> Result<TrainReport, FieldError> {
        let (positions, targets) = (&samples.positions, &samples.vectors);
        check_samples(positions, targets)?;
        let refit = cold_start || !self.box_fitted() || positions.iter().any(|p| !self.bbox().contains(p));
        let bbox = if refit { fit_normalization(positions, self.config().box_margin)? } else { *self.bbox() };
        if cold_start {
            let mut fresh = MotionField::new(*self.config(), options.seed)?;
            let version = self.version();
            let report = fresh.run(positions, targets, bbox, refit, options)?;
            fresh.set_version(version + 1);
            *self = fresh;
            return Ok(report);
        }
        self.run(positions, targets, bbox, refit, options)
    }

    fn run(
        &mut self,
        positions: &[Vec3],
        targets: &[Vec3],
        bbox: NormalizationBox,
        box_refit: bool,
        options: &TrainOptions,
    ) -> Result<TrainReport, FieldError> {
        if !(options.learning_rate >= 0.0 && options.learning_rate.is_finite()) {
            return Err(FieldError::InvalidConfig(format!("learning rate {}", options.learning_rate)));
        }
        let layout = self.layout().clone();
        let f = self.config().encoding.features_per_level;
        let order = morton_order(&bbox, positions);
        let positions: Vec<Vec3> = order.iter().map(|&i| positions[i]).collect();
        let targets: Vec<Vec3> = order.iter().map(|&i| targets[i]).collect();
        let corners = CornerTable::build(self.plan(), &bbox, &positions);
        let runs = row_runs(&corners.touched_rows(layout.embedding_len / f));
        let touched_len: usize = runs.iter().map(|r| r.1).sum();
        let mut params = self.params().to_vec();
        let mut grad = vec![0.0f32; layout.total];
        let mut adam = Adam::new(layout.total - layout.embedding_len, touched_len * f);
        let mut loss_curve = Vec::with_capacity(options.iterations);
        for iteration in 0..options.iterations {
            grad[layout.embedding_len..].fill(0.0);
            for &(first, len) in &runs {
                grad[first * f..(first + len) * f].fill(0.0);
            }
            let loss = evaluate(&layout, f, &params, &corners, &targets, Some(&mut grad));
            if !loss.is_finite() {
                return Err(FieldError::NonFiniteLoss { iteration });
            }
            loss_curve.push(loss);
            adam.apply(&mut params, &grad, &layout, &runs, f, options.learning_rate);
        }
        let mut final_loss = evaluate(&layout, f, &params, &corners, &targets, None);
        if !final_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(FieldError::NonFiniteLoss { iteration: options.iterations });
        }
        let start = loss_curve.first().copied().unwrap_or(final_loss);
        let reverted = final_loss > start;
        if reverted {
            final_loss = start;
        }
        self.commit(bbox, (!reverted).then_some(params));
        Ok(TrainReport {
            iterations: options.iterations,
            samples: positions.len(),
            loss_curve,
            final_loss,
            box_refit,
            reverted,
            loss_normalization: LOSS_NORMALIZATION,
        })
    }
}
