//! Neighbourhood motion-consistency metrics.
//!
//! MCA is the mean cosine similarity between each flow direction and those of
//! its K nearest neighbours (by position). FMV is the mean squared magnitude
//! difference over the same neighbourhoods.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::alignment::FlowSampleSet;
use crate::geometry::Vec3;

pub const DEFAULT_K: usize = 8;
/// Largest N for which [`knn`] uses the exhaustive search.
pub const EXHAUSTIVE_MAX: usize = 2000;
/// Flow vectors at or below this norm have no direction.
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("neighbour graph covers {graph} samples, flow set has {flows}")]
    SizeMismatch { graph: usize, flows: usize },
    #[error("non-finite position at sample {0}")]
    NonFinite(usize),
}

/// Per-sample neighbour lists, each sorted by (distance, index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check(positions: &[Vec3], k: usize) -> Result<(), MetricsError> {
    if positions.len() < 2 {
        return Err(MetricsError::TooFewSamples(positions.len()));
    }
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if let Some(i) = positions.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(MetricsError::NonFinite(i));
    }
    Ok(())
}

/// Exact K nearest neighbours; equal distances go to the lower index.
pub fn knn(positions: &[Vec3], k: usize) -> Result<NeighborGraph, MetricsError> {
    if positions.len() <= EXHAUSTIVE_MAX {
        knn_exhaustive(positions, k)
    } else {
        knn_grid(positions, k)
    }
}

pub fn knn_exhaustive(positions: &[Vec3], k: usize) -> Result<NeighborGraph, MetricsError> {
    check(positions, k)?;
    let keep = k.min(positions.len() - 1);
    let indices = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = Best::new(keep);
            for (j, q) in positions.iter().enumerate() {
                if j != i {
                    best.offer((p - q).norm_squared(), j);
                }
            }
            best.into_indices()
        })
        .collect();
    Ok(NeighborGraph { k, indices })
}

/// Bounded list of the smallest `(d², index)` pairs, kept sorted.
struct Best {
    cap: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn new(cap: usize) -> Self {
        Best { cap, items: Vec::with_capacity(cap + 1) }
    }

    fn worse(a: (f64, usize), b: (f64, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
    }

    fn offer(&mut self, d2: f64, j: usize) {
        if self.items.len() == self.cap {
            if !Best::worse(*self.items.last().expect("cap ≥ 1"), (d2, j)) {
                return;
            }
            self.items.pop();
        }
        let at = self.items.partition_point(|&e| !Best::worse(e, (d2, j)));
        self.items.insert(at, (d2, j));
    }

    fn full(&self) -> bool {
        self.items.len() == self.cap
    }

    fn worst(&self) -> f64 {
        self.items.last().map_or(f64::INFINITY, |e| e.0)
    }

    fn into_indices(self) -> Vec<usize> {
        self.items.into_iter().map(|e| e.1).collect()
    }
}

/// Uniform-grid search: rings of cells are visited in Chebyshev order until no
/// unvisited cell can hold a point at or below the current K-th distance.
pub fn knn_grid(positions: &[Vec3], k: usize) -> Result<NeighborGraph, MetricsError> {
    check(positions, k)?;
    let n = positions.len();
    let keep = k.min(n - 1);
    let mut lo = positions[0];
    let mut hi = positions[0];
    for p in positions {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let max_ext = extent.max();
    if max_ext == 0.0 {
        return knn_exhaustive(positions, k);
    }
    let occupied: Vec<f64> = extent.iter().copied().filter(|&e| e > 1e-3 * max_ext).collect();
    let dims_used = occupied.len() as f64;
    let cell = (occupied.iter().product::<f64>() * keep.max(1) as f64 / n as f64).powf(1.0 / dims_used);
    let cell = cell.max(max_ext * 1e-6);
    let dims: [i64; 3] = std::array::from_fn(|a| (extent[a] / cell).floor() as i64 + 1);
    let key = |p: &Vec3| -> [i64; 3] {
        std::array::from_fn(|a| (((p[a] - lo[a]) / cell).floor() as i64).clamp(0, dims[a] - 1))
    };

    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let max_ring = *dims.iter().max().expect("3 dims");

    let indices = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best = Best::new(keep);
            for r in 0..=max_ring {
                let lo_c: [i64; 3] = std::array::from_fn(|a| (c[a] - r).max(0));
                let hi_c: [i64; 3] = std::array::from_fn(|a| (c[a] + r).min(dims[a] - 1));
                for x in lo_c[0]..=hi_c[0] {
                    for y in lo_c[1]..=hi_c[1] {
                        for z in lo_c[2]..=hi_c[2] {
                            let ring = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                            if ring != r {
                                continue;
                            }
                            if let Some(members) = buckets.get(&[x, y, z]) {
                                for &j in members {
                                    if j != i {
                                        best.offer((p - positions[j]).norm_squared(), j);
                                    }
                                }
                            }
                        }
                    }
                }
                // Unvisited points are at least r·cell away.
                let reach = r as f64 * cell;
                if best.full() && best.worst() < reach * reach {
                    break;
                }
            }
            best.into_indices()
        })
        .collect();
    Ok(NeighborGraph { k, indices })
}

fn check_graph(flows: &FlowSampleSet, graph: &NeighborGraph) -> Result<(), MetricsError> {
    if graph.len() != flows.len() {
        return Err(MetricsError::SizeMismatch { graph: graph.len(), flows: flows.len() });
    }
    if flows.len() < 2 {
        return Err(MetricsError::TooFewSamples(flows.len()));
    }
    Ok(())
}

/// Mean cosine alignment in `[−1, 1]`. Zero-norm vectors take no part as a
/// centre or as a neighbour; a centre with no usable neighbour is skipped.
/// `None` when nothing is left.
pub fn mca(flows: &FlowSampleSet, graph: &NeighborGraph) -> Result<Option<f64>, MetricsError> {
    check_graph(flows, graph)?;
    let dirs: Vec<Option<Vec3>> = flows
        .vectors
        .iter()
        .map(|v| {
            let n = v.norm();
            (n > ZERO_NORM_EPS).then(|| v / n)
        })
        .collect();
    let mut total = 0.0;
    let mut centres = 0usize;
    for (p, nbrs) in graph.indices.iter().enumerate() {
        let Some(sp) = dirs[p] else { continue };
        let mut sum = 0.0;
        let mut used = 0usize;
        for &j in nbrs {
            if let Some(sj) = dirs[j] {
                sum += sp.dot(&sj);
                used += 1;
            }
        }
        if used > 0 {
            total += sum / used as f64;
            centres += 1;
        }
    }
    Ok((centres > 0).then(|| total / centres as f64))
}

/// Mean squared neighbour magnitude difference.
pub fn fmv(flows: &FlowSampleSet, graph: &NeighborGraph) -> Result<f64, MetricsError> {
    check_graph(flows, graph)?;
    let mags: Vec<f64> = flows.vectors.iter().map(|v| v.norm()).collect();
    let mut total = 0.0;
    for (p, nbrs) in graph.indices.iter().enumerate() {
        let sum: f64 = nbrs.iter().map(|&j| (mags[p] - mags[j]).powi(2)).sum();
        total += sum / nbrs.len() as f64;
    }
    Ok(total / flows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub k: usize,
    pub mca: Option<f64>,
    pub fmv: f64,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mca = self.mca.map_or_else(|| "none".to_string(), |m| format!("{m:.6}"));
        write!(f, "n={} k={} mca={} fmv={:.6}", self.n, self.k, mca, self.fmv)
    }
}

/// k-NN graph plus both metrics.
pub fn evaluate(flows: &FlowSampleSet, k: usize) -> Result<MetricReport, MetricsError> {
    let graph = knn(&flows.positions, k)?;
    Ok(MetricReport { n: flows.len(), k, mca: mca(flows, &graph)?, fmv: fmv(flows, &graph)? })
}
