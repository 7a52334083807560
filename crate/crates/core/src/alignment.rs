//! Cross-view scene-flow consolidation.
//!
//! Samples of the current view are paired with previously accumulated samples
//! that land in the same rounded pixel cell of the current camera. A similarity
//! `(R, s)` acting on flow vectors is then estimated so that `s·R·v_cur ≈ v_acc`:
//! a closed-form Kabsch rotation with a one-dimensional least-squares scale,
//! followed by gradient refinement. Unmatched current samples are mapped
//! through the transform and appended to the accumulated set.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{Matrix3, Rotation3, SVD};
use thiserror::Error;

use crate::geometry::{is_rotation, PinholeCamera, Vec3};

/// Smallest scale `kabsch_init` will return.
pub const MIN_SCALE: f64 = 1e-8;
/// `σ₂/σ₁` of the cross-covariance below which rotation is unobservable.
pub const DEGENERACY_RATIO: f64 = 1e-6;
pub const DEFAULT_REFINE_ITERS: usize = 300;
pub const DEFAULT_REFINE_LR: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("degenerate correspondences: {pairs} pairs, singular value ratio {ratio:e}")]
    DegenerateCorrespondences { pairs: usize, ratio: f64 },
    #[error("flow sample set: {0}")]
    InvalidSamples(String),
    #[error("matched lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Sparse 3D positions with attached velocity vectors, tagged by source view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowSampleSet {
    pub positions: Vec<Vec3>,
    pub vectors: Vec<Vec3>,
    pub view_ids: Vec<u32>,
}

impl FlowSampleSet {
    pub fn new(positions: Vec<Vec3>, vectors: Vec<Vec3>, view_ids: Vec<u32>) -> Result<Self, AlignmentError> {
        let set = FlowSampleSet { positions, vectors, view_ids };
        set.validate()?;
        Ok(set)
    }

    /// All samples tagged with a single view id.
    pub fn from_view(positions: Vec<Vec3>, vectors: Vec<Vec3>, view_id: u32) -> Result<Self, AlignmentError> {
        let ids = vec![view_id; positions.len()];
        FlowSampleSet::new(positions, vectors, ids)
    }

    pub fn validate(&self) -> Result<(), AlignmentError> {
        if self.positions.len() != self.vectors.len() || self.positions.len() != self.view_ids.len() {
            return Err(AlignmentError::InvalidSamples(format!(
                "{} positions, {} vectors, {} view ids",
                self.positions.len(),
                self.vectors.len(),
                self.view_ids.len()
            )));
        }
        let finite = |v: &Vec3| v.iter().all(|c| c.is_finite());
        if let Some(i) = (0..self.len()).find(|&i| !finite(&self.positions[i]) || !finite(&self.vectors[i])) {
            return Err(AlignmentError::InvalidSamples(format!("non-finite sample {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, position: Vec3, vector: Vec3, view_id: u32) {
        self.positions.push(position);
        self.vectors.push(vector);
        self.view_ids.push(view_id);
    }

    pub fn extend_from(&mut self, other: &FlowSampleSet) {
        self.positions.extend_from_slice(&other.positions);
        self.vectors.extend_from_slice(&other.vectors);
        self.view_ids.extend_from_slice(&other.view_ids);
    }

    pub fn subset(&self, indices: &[usize]) -> FlowSampleSet {
        FlowSampleSet {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            vectors: indices.iter().map(|&i| self.vectors[i]).collect(),
            view_ids: indices.iter().map(|&i| self.view_ids[i]).collect(),
        }
    }
}

/// Pairs `(current index, accumulated index)` found in one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub camera: PinholeCamera,
}

impl CorrespondenceSet {
    pub fn empty(camera: PinholeCamera) -> Self {
        CorrespondenceSet { pairs: Vec::new(), camera }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(current vectors, accumulated vectors)` in pair order.
    pub fn matched_vectors(
        &self,
        current: &FlowSampleSet,
        accumulated: &FlowSampleSet,
    ) -> (Vec<Vec3>, Vec<Vec3>) {
        self.pairs.iter().map(|&(a, b)| (current.vectors[a], accumulated.vectors[b])).unzip()
    }
}

/// Rotation plus uniform scale acting on flow vectors: `v ↦ s·R·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentTransform {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
}

impl AlignmentTransform {
    pub fn identity() -> Self {
        AlignmentTransform { rotation: Matrix3::identity(), scale: 1.0 }
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.scale * (self.rotation * v)
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation, 1e-9) && self.scale > 0.0 && self.scale.is_finite()
    }

    /// `(unit axis, angle)`; the axis is `+x` for the identity rotation.
    pub fn axis_angle(&self) -> (Vec3, f64) {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        match rot.axis_angle() {
            Some((axis, angle)) => (axis.into_inner(), angle),
            None => (Vec3::x(), 0.0),
        }
    }
}

/// Index of the nearest sample in each occupied, in-image pixel cell.
/// Depth ties keep the lower index.
fn nearest_per_cell(positions: &[Vec3], camera: &PinholeCamera) -> HashMap<(i64, i64), (f64, usize)> {
    let mut cells: HashMap<(i64, i64), (f64, usize)> = HashMap::new();
    for (i, p) in positions.iter().enumerate() {
        let Some((cell, depth)) = camera.pixel_cell(p) else { continue };
        cells
            .entry(cell)
            .and_modify(|best| {
                if depth < best.0 {
                    *best = (depth, i);
                }
            })
            .or_insert((depth, i));
    }
    cells
}

/// Pairs positions that share a rounded pixel cell of `camera`. Sorted by
/// current index.
pub fn match_positions(
    current: &[Vec3],
    accumulated: &[Vec3],
    camera: &PinholeCamera,
) -> Vec<(usize, usize)> {
    if current.is_empty() || accumulated.is_empty() {
        return Vec::new();
    }
    let cur = nearest_per_cell(current, camera);
    let acc = nearest_per_cell(accumulated, camera);
    let mut pairs: Vec<(usize, usize)> =
        cur.iter().filter_map(|(cell, &(_, a))| acc.get(cell).map(|&(_, b)| (a, b))).collect();
    pairs.sort_unstable();
    pairs
}

pub fn match_by_reprojection(
    current: &FlowSampleSet,
    accumulated: &FlowSampleSet,
    camera: &PinholeCamera,
) -> CorrespondenceSet {
    CorrespondenceSet {
        pairs: match_positions(&current.positions, &accumulated.positions, camera),
        camera: *camera,
    }
}

/// Mean squared residual `‖acc − s·R·cur‖²` over the pairs (0 for no pairs).
pub fn alignment_objective(t: &AlignmentTransform, current: &[Vec3], accumulated: &[Vec3]) -> f64 {
    if current.is_empty() {
        return 0.0;
    }
    let sr = t.rotation * t.scale;
    let sum: f64 = current.iter().zip(accumulated).map(|(c, a)| (a - sr * c).norm_squared()).sum();
    sum / current.len() as f64
}

/// Closed-form rotation (SVD of the cross-covariance with determinant
/// correction) and least-squares scale.
pub fn kabsch_init(current: &[Vec3], accumulated: &[Vec3]) -> Result<AlignmentTransform, AlignmentError> {
    if current.len() != accumulated.len() {
        return Err(AlignmentError::LengthMismatch(current.len(), accumulated.len()));
    }
    let n = current.len();
    if n < 3 {
        return Err(AlignmentError::DegenerateCorrespondences { pairs: n, ratio: 0.0 });
    }
    // H = Σ cur·accᵀ; the optimal R maximizes tr(R·H).
    let mut h = Matrix3::zeros();
    for (c, a) in current.iter().zip(accumulated) {
        h += c * a.transpose();
    }
    let svd = SVD::new(h, true, true);
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let ratio = if sv[order[0]] > 0.0 { sv[order[1]] / sv[order[0]] } else { 0.0 };
    if !(ratio >= DEGENERACY_RATIO) {
        return Err(AlignmentError::DegenerateCorrespondences { pairs: n, ratio });
    }
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let rotation = v * d * u.transpose();

    let (mut num, mut den) = (0.0, 0.0);
    for (c, a) in current.iter().zip(accumulated) {
        num += a.dot(&(rotation * c));
        den += c.norm_squared();
    }
    let scale = if den > 0.0 { (num / den).max(MIN_SCALE) } else { 1.0 };
    Ok(AlignmentTransform { rotation, scale })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOutcome {
    pub transform: AlignmentTransform,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub accepted_steps: usize,
}

/// Gradient descent on the mean alignment objective.
///
/// Rotation updates are left-multiplicative axis-angle increments
/// `R ← exp([δω]×)·R`; scale is updated in log space. A step that would
/// increase the objective is retried with a halved rate, so the objective
/// never increases across accepted steps.
pub fn refine_alignment(
    init: AlignmentTransform,
    current: &[Vec3],
    accumulated: &[Vec3],
    iters: usize,
    lr: f64,
) -> RefineOutcome {
    let mut t = init;
    let mut f = alignment_objective(&t, current, accumulated);
    let initial_objective = f;
    let mut accepted_steps = 0;
    if current.is_empty() || current.len() != accumulated.len() {
        return RefineOutcome { transform: init, initial_objective, final_objective: f, accepted_steps };
    }
    let n = current.len() as f64;
    for _ in 0..iters {
        let sr = t.rotation * t.scale;
        let mut g_rot = Vec3::zeros();
        let mut g_log_scale = 0.0;
        for (c, a) in current.iter().zip(accumulated) {
            let q = sr * c;
            let r = a - q;
            g_rot -= q.cross(&r);
            g_log_scale -= r.dot(&q);
        }
        g_rot *= 2.0 / n;
        g_log_scale *= 2.0 / n;
        if g_rot.norm() == 0.0 && g_log_scale == 0.0 {
            break;
        }
        let mut step = lr;
        let mut accepted = false;
        for _ in 0..40 {
            let rotation = Rotation3::new(-step * g_rot).into_inner() * t.rotation;
            let candidate = AlignmentTransform { rotation, scale: t.scale * (-step * g_log_scale).exp() };
            let fc = alignment_objective(&candidate, current, accumulated);
            if fc <= f {
                t = candidate;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        accepted_steps += 1;
    }
    RefineOutcome { transform: t, initial_objective, final_objective: f, accepted_steps }
}

/// Appends `s·R`-mapped unmatched current samples to the accumulated set.
/// Matched current samples are dropped; with no matches the identity is used.
pub fn merge_aligned(
    current: &FlowSampleSet,
    matched: &CorrespondenceSet,
    transform: &AlignmentTransform,
    accumulated: &FlowSampleSet,
) -> FlowSampleSet {
    let transform = if matched.is_empty() { AlignmentTransform::identity() } else { *transform };
    let mut is_matched = vec![false; current.len()];
    for &(a, _) in &matched.pairs {
        is_matched[a] = true;
    }
    let mut out = accumulated.clone();
    for i in (0..current.len()).filter(|&i| !is_matched[i]) {
        let v = if matched.is_empty() { current.vectors[i] } else { transform.apply(&current.vectors[i]) };
        out.push(current.positions[i], v, current.view_ids[i]);
    }
    out
}

/// One structured line of per-step alignment diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentDiagnostics {
    pub correspondences: usize,
    pub pre_objective: f64,
    pub post_objective: f64,
    pub transform: AlignmentTransform,
}

impl fmt::Display for AlignmentDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (axis, angle) = self.transform.axis_angle();
        write!(
            f,
            "correspondences={} pre_objective={:e} post_objective={:e} axis={:.9},{:.9},{:.9} angle={:e} scale={}",
            self.correspondences,
            self.pre_objective,
            self.post_objective,
            axis.x,
            axis.y,
            axis.z,
            angle,
            self.transform.scale
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle_between, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn rz(deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vec3::z_axis(), deg.to_radians()).into_inner()
    }

    fn random_vectors(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
            })
            .collect()
    }

    fn camera() -> PinholeCamera {
        PinholeCamera::new(200.0, 200.0, 100.0, 80.0, 200, 160, Pose::identity()).unwrap()
    }

    #[test]
    fn empty_accumulated_gives_empty_matches() {
        let cur = FlowSampleSet::from_view(vec![Vec3::new(0.0, 0.0, 2.0)], vec![Vec3::x()], 0).unwrap();
        assert!(match_by_reprojection(&cur, &FlowSampleSet::default(), &camera()).is_empty());
    }

    #[test]
    fn identical_position_matches_once() {
        let p = Vec3::new(0.1, -0.2, 3.0);
        let cur = FlowSampleSet::from_view(vec![p], vec![Vec3::x()], 1).unwrap();
        let acc = FlowSampleSet::from_view(vec![p], vec![Vec3::y()], 0).unwrap();
        assert_eq!(match_by_reprojection(&cur, &acc, &camera()).pairs, vec![(0, 0)]);
    }

    #[test]
    fn excludes_behind_and_out_of_image_samples() {
        let inside = Vec3::new(0.0, 0.0, 2.0);
        let behind = Vec3::new(0.0, 0.0, -2.0);
        let outside = Vec3::new(50.0, 0.0, 2.0);
        let cur = FlowSampleSet::from_view(vec![behind, outside, inside], vec![Vec3::x(); 3], 1).unwrap();
        let acc = FlowSampleSet::from_view(vec![behind, outside, inside], vec![Vec3::x(); 3], 0).unwrap();
        assert_eq!(match_by_reprojection(&cur, &acc, &camera()).pairs, vec![(2, 2)]);
    }

    #[test]
    fn cell_collisions_keep_nearest_depth() {
        let cam = camera();
        let near = cam.unproject(40.0, 40.0, 2.0).unwrap();
        let far = cam.unproject(40.1, 39.9, 5.0).unwrap();
        let cur = FlowSampleSet::from_view(vec![far, near], vec![Vec3::x(); 2], 1).unwrap();
        let acc = FlowSampleSet::from_view(vec![near, far], vec![Vec3::x(); 2], 0).unwrap();
        assert_eq!(match_by_reprojection(&cur, &acc, &cam).pairs, vec![(1, 0)]);
    }

    /// Exhaustive O(N²) matcher: for every current sample, check it is the nearest
    /// current sample in its cell, then scan all accumulated samples for the nearest
    /// one in the same cell.
    fn brute_force_matches(cur: &[Vec3], acc: &[Vec3], cam: &PinholeCamera) -> Vec<(usize, usize)> {
        let cell_of = |p: &Vec3| {
            let ip = cam.project(p)?;
            let c = ((ip.u + 0.5).floor() as i64, (ip.v + 0.5).floor() as i64);
            (c.0 >= 0 && c.1 >= 0 && c.0 < cam.width as i64 && c.1 < cam.height as i64)
                .then_some((c, ip.depth))
        };
        let mut out = Vec::new();
        for (a, pa) in cur.iter().enumerate() {
            let Some((ca, da)) = cell_of(pa) else { continue };
            let dominated = cur.iter().enumerate().any(|(o, po)| {
                o != a && cell_of(po).is_some_and(|(co, d_o)| co == ca && (d_o < da || (d_o == da && o < a)))
            });
            if dominated {
                continue;
            }
            let mut best: Option<(f64, usize)> = None;
            for (b, pb) in acc.iter().enumerate() {
                if let Some((cb, db)) = cell_of(pb) {
                    if cb == ca && best.is_none_or(|(bd, _)| db < bd) {
                        best = Some((db, b));
                    }
                }
            }
            if let Some((_, b)) = best {
                out.push((a, b));
            }
        }
        out
    }

    #[test]
    fn jittered_duplicates_match_brute_force() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cells = std::collections::HashSet::new();
        let mut cur = Vec::new();
        let mut acc = Vec::new();
        while cur.len() < 100 {
            let (px, py) = (rng.random_range(1..199i64), rng.random_range(1..159i64));
            if !cells.insert((px, py)) {
                continue;
            }
            let u = px as f64 + rng.random_range(-0.3..0.3);
            let v = py as f64 + rng.random_range(-0.3..0.3);
            let d = rng.random_range(1.0..10.0);
            cur.push(cam.unproject(u, v, d).unwrap());
            let ju = rng.random_range(-0.1..0.1);
            let jv = rng.random_range(-0.1..0.1);
            acc.push(cam.unproject(u + ju, v + jv, d * 1.01).unwrap());
        }
        // Shuffle the accumulated side so pairs are not the identity permutation.
        acc.reverse();
        let pairs = match_positions(&cur, &acc, &cam);
        assert_eq!(pairs.len(), 100);
        assert_eq!(pairs, brute_force_matches(&cur, &acc, &cam));
        assert!(pairs.iter().all(|&(a, b)| b == 99 - a));
    }

    #[test]
    fn random_clouds_with_collisions_match_brute_force() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gen = |n: usize| -> Vec<Vec3> {
            (0..n)
                .map(|_| {
                    cam.unproject(
                        rng.random_range(-5.0..205.0),
                        rng.random_range(-5.0..165.0),
                        rng.random_range(0.5..4.0),
                    )
                    .unwrap()
                })
                .collect()
        };
        let cur = gen(3000);
        let acc = gen(3000);
        let pairs = match_positions(&cur, &acc, &cam);
        assert!(!pairs.is_empty());
        assert_eq!(pairs, brute_force_matches(&cur, &acc, &cam));
    }

    #[test]
    fn identical_sets_recover_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_vectors(&mut rng, 50);
        let t = kabsch_init(&v, &v).unwrap();
        assert!(rotation_angle_between(&t.rotation, &Matrix3::identity()) < 1e-9);
        assert!((t.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recovers_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let acc = random_vectors(&mut rng, 40);
        // current = 0.5·R_z(90°)·accumulated, so s·R·current = accumulated needs s = 2, R = R_z(90°)ᵀ.
        let cur: Vec<Vec3> = acc.iter().map(|a| 0.5 * (rz(90.0) * a)).collect();
        let t = kabsch_init(&cur, &acc).unwrap();
        assert!(rotation_angle_between(&t.rotation, &rz(90.0).transpose()) < 1e-6);
        assert!((t.scale - 2.0).abs() < 1e-9);
        for (c, a) in cur.iter().zip(&acc) {
            assert!((t.apply(c) - a).norm() < 1e-9);
        }
    }

    #[test]
    fn handles_reflection_case_with_determinant_correction() {
        // Planar vectors related by a reflection: best proper rotation must still have det +1.
        let cur: Vec<Vec3> = (0..10).map(|i| Vec3::new((i as f64).cos(), (i as f64).sin(), 0.0)).collect();
        let acc: Vec<Vec3> = cur.iter().map(|c| Vec3::new(c.x, -c.y, 0.0)).collect();
        let t = kabsch_init(&cur, &acc).unwrap();
        assert!(t.is_valid());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let v = vec![Vec3::x(), Vec3::y()];
        assert!(matches!(
            kabsch_init(&v, &v),
            Err(AlignmentError::DegenerateCorrespondences { pairs: 2, .. })
        ));
        let collinear: Vec<Vec3> = (1..20).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            kabsch_init(&collinear, &collinear),
            Err(AlignmentError::DegenerateCorrespondences { .. })
        ));
        let zeros = vec![Vec3::zeros(); 5];
        assert!(kabsch_init(&zeros, &zeros).is_err());
        assert!(matches!(kabsch_init(&v, &v[..1]), Err(AlignmentError::LengthMismatch(2, 1))));
    }

    #[test]
    fn noisy_alignment_residual_within_two_sigma() {
        let sigma = 0.01;
        let mut worst: f64 = 0.0;
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let truth: Vec<Vec3> = random_vectors(&mut rng, 200).into_iter().map(|v| v.normalize()).collect();
            let r = Rotation3::new(Vec3::new(0.3, -0.5, 0.8)).into_inner();
            let noise = Normal::new(0.0, sigma).unwrap();
            let cur: Vec<Vec3> = truth.iter().map(|v| 1.3 * (r * v)).collect();
            let acc: Vec<Vec3> = truth
                .iter()
                .map(|v| {
                    v + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
                })
                .collect();
            let t = kabsch_init(&cur, &acc).unwrap();
            // Per-component RMS residual.
            let rms = (alignment_objective(&t, &cur, &acc) / 3.0).sqrt();
            worst = worst.max(rms);
        }
        assert!(worst <= 2.0 * sigma, "worst rms {worst}");
    }

    #[test]
    fn kabsch_rotation_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let acc = random_vectors(&mut rng, 60);
        let nuisance = Rotation3::new(Vec3::new(-0.4, 1.1, 0.2)).into_inner();
        let cur: Vec<Vec3> = acc.iter().map(|a| 0.7 * (nuisance * a)).collect();
        let t = kabsch_init(&cur, &acc).unwrap();
        let best = alignment_objective(&t, &cur, &acc);
        for _ in 0..1000 {
            let dir = random_vectors(&mut rng, 1)[0].normalize();
            let angle = rng.random_range(1e-4..0.5);
            let perturbed = AlignmentTransform {
                rotation: Rotation3::new(dir * angle).into_inner() * t.rotation,
                scale: t.scale,
            };
            assert!(alignment_objective(&perturbed, &cur, &acc) > best);
        }
    }

    #[test]
    fn refine_keeps_optimal_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let acc = random_vectors(&mut rng, 80);
        let cur: Vec<Vec3> = acc.iter().map(|a| 1.5 * (rz(30.0) * a)).collect();
        let init = kabsch_init(&cur, &acc).unwrap();
        let out = refine_alignment(init, &cur, &acc, DEFAULT_REFINE_ITERS, DEFAULT_REFINE_LR);
        assert!((out.transform.rotation - init.rotation).amax() < 1e-9);
        assert!((out.transform.scale - init.scale).abs() < 1e-9);
    }

    #[test]
    fn refine_recovers_from_perturbed_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let acc: Vec<Vec3> = random_vectors(&mut rng, 120).into_iter().map(|v| v.normalize()).collect();
        let cur: Vec<Vec3> = acc.iter().map(|a| 0.8 * (rz(-40.0) * a)).collect();
        let exact = kabsch_init(&cur, &acc).unwrap();
        let kick = Rotation3::new(Vec3::new(1.0, 2.0, -1.0).normalize() * 5f64.to_radians()).into_inner();
        let perturbed = AlignmentTransform { rotation: kick * exact.rotation, scale: exact.scale };
        let out = refine_alignment(perturbed, &cur, &acc, DEFAULT_REFINE_ITERS, DEFAULT_REFINE_LR);
        assert!(out.final_objective <= 0.1 * out.initial_objective);
        assert!(out.transform.is_valid());
    }

    #[test]
    fn refine_does_not_worsen_noisy_kabsch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let acc: Vec<Vec3> = random_vectors(&mut rng, 200).into_iter().map(|v| v.normalize()).collect();
        let cur: Vec<Vec3> = acc
            .iter()
            .map(|a| {
                rz(20.0) * a
                    + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            })
            .collect();
        let init = kabsch_init(&cur, &acc).unwrap();
        let out = refine_alignment(init, &cur, &acc, DEFAULT_REFINE_ITERS, DEFAULT_REFINE_LR);
        assert!(out.final_objective <= alignment_objective(&init, &cur, &acc));
    }

    #[test]
    fn refine_objective_monotone_even_with_huge_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let acc: Vec<Vec3> = random_vectors(&mut rng, 50).into_iter().map(|v| v * 30.0).collect();
        let cur: Vec<Vec3> = acc.iter().map(|a| rz(70.0) * a).collect();
        let mut t = AlignmentTransform::identity();
        let mut prev = alignment_objective(&t, &cur, &acc);
        for _ in 0..20 {
            let out = refine_alignment(t, &cur, &acc, 1, 10.0);
            assert!(out.final_objective <= prev);
            prev = out.final_objective;
            t = out.transform;
        }
    }

    #[test]
    fn refine_with_no_pairs_returns_init() {
        let init = AlignmentTransform { rotation: rz(10.0), scale: 2.0 };
        assert_eq!(refine_alignment(init, &[], &[], 300, 0.1).transform, init);
    }

    fn hundred_samples(rng: &mut ChaCha8Rng) -> FlowSampleSet {
        let positions = random_vectors(rng, 100);
        let vectors = random_vectors(rng, 100);
        FlowSampleSet::from_view(positions, vectors, 3).unwrap()
    }

    #[test]
    fn merge_drops_matched_and_transforms_the_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cur = hundred_samples(&mut rng);
        let acc =
            FlowSampleSet::from_view(random_vectors(&mut rng, 70), random_vectors(&mut rng, 70), 0).unwrap();
        let matched = CorrespondenceSet { pairs: (0..60).map(|i| (i, i)).collect(), camera: camera() };
        let t = AlignmentTransform { rotation: rz(30.0), scale: 1.5 };
        let out = merge_aligned(&cur, &matched, &t, &acc);
        assert_eq!(out.len(), 70 + 40);
        assert_eq!(&out.positions[..70], &acc.positions[..]);
        for k in 0..40 {
            let expected = 1.5 * (rz(30.0) * cur.vectors[60 + k]);
            assert!((out.vectors[70 + k] - expected).amax() < 1e-12);
            assert_eq!(out.positions[70 + k], cur.positions[60 + k]);
            assert_eq!(out.view_ids[70 + k], 3);
        }
    }

    #[test]
    fn merge_all_matched_or_empty_accumulated() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cur = hundred_samples(&mut rng);
        let acc = hundred_samples(&mut rng);
        let all = CorrespondenceSet { pairs: (0..100).map(|i| (i, 99 - i)).collect(), camera: camera() };
        let t = AlignmentTransform { rotation: rz(5.0), scale: 3.0 };
        assert_eq!(merge_aligned(&cur, &all, &t, &acc), acc);
        let none = CorrespondenceSet::empty(camera());
        assert_eq!(merge_aligned(&cur, &none, &t, &FlowSampleSet::default()), cur);
    }

    #[test]
    fn diagnostics_line_is_single_line() {
        let d = AlignmentDiagnostics {
            correspondences: 12,
            pre_objective: 0.5,
            post_objective: 0.25,
            transform: AlignmentTransform { rotation: rz(90.0), scale: 2.0 },
        };
        let line = d.to_string();
        assert!(!line.contains('\n'));
        assert!(line.starts_with("correspondences=12 "));
        assert!(line.contains("scale=2"));
    }

    #[test]
    fn validates_sample_sets() {
        assert!(FlowSampleSet::new(vec![Vec3::x()], vec![], vec![0]).is_err());
        assert!(FlowSampleSet::from_view(vec![Vec3::x()], vec![Vec3::new(f64::NAN, 0.0, 0.0)], 0).is_err());
    }
}
