//! Analytic velocity fields and a synthetic expanding-camera scene.
//!
//! The generator lays a jittered grid of points over a gentle height field and
//! flies a downward-looking camera along +x. Each view keeps the z-buffer
//! winners inside its frustum, samples the analytic field at those points and
//! then corrupts the flow vectors with a per-view similarity transform (the
//! first view is the reference frame and is never corrupted).

use std::collections::HashMap;

use nalgebra::{Matrix3, Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::FlowSampleSet;
use crate::geometry::{DepthMap, FlowGrid2d, PinholeCamera, PointCloud, Pose, Vec3};
use crate::VelocityField;

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticField {
    /// Constant velocity (m/step).
    Uniform {
        velocity: Vec3,
    },
    /// Rigid rotation `rate · axis × (x − center)` (rad/step).
    Vortex {
        axis: Unit<Vec3>,
        center: Vec3,
        rate: f64,
    },
    /// Linear field `gradient · (x − origin)`.
    Shear {
        gradient: Matrix3<f64>,
        origin: Vec3,
    },
    Sum(Vec<AnalyticField>),
}

impl AnalyticField {
    pub fn uniform(velocity: Vec3) -> Self {
        AnalyticField::Uniform { velocity }
    }

    /// The axis is normalized; panics on a zero axis.
    pub fn vortex(axis: Vec3, center: Vec3, rate: f64) -> Self {
        let axis = Unit::try_new(axis, 1e-12).expect("vortex axis must be non-zero");
        AnalyticField::Vortex { axis, center, rate }
    }

    pub fn shear(gradient: Matrix3<f64>, origin: Vec3) -> Self {
        AnalyticField::Shear { gradient, origin }
    }

    pub fn eval(&self, x: &Vec3) -> Vec3 {
        match self {
            AnalyticField::Uniform { velocity } => *velocity,
            AnalyticField::Vortex { axis, center, rate } => *rate * axis.cross(&(x - center)),
            AnalyticField::Shear { gradient, origin } => gradient * (x - origin),
            AnalyticField::Sum(children) => children.iter().fold(Vec3::zeros(), |acc, c| acc + c.eval(x)),
        }
    }

    /// Swirl about a slightly tilted vertical axis plus a steady drift, sized for
    /// the default scene.
    pub fn default_scene_field() -> Self {
        AnalyticField::Sum(vec![
            AnalyticField::vortex(Vec3::new(0.15, 0.1, 1.0), Vec3::new(4.0, 0.0, 0.0), 0.01),
            AnalyticField::uniform(Vec3::new(0.02, 0.005, 0.0)),
        ])
    }
}

impl VelocityField for AnalyticField {
    fn velocity(&self, x: &Vec3) -> Vec3 {
        self.eval(x)
    }
}

/// Cumulative pixel displacement after `steps` Euler steps of a static 2D
/// velocity grid: `F_t(x₀) = F_{t−1}(x₀) + M(x₀ + F_{t−1}(x₀))`, with bilinear
/// sampling clamped to the grid border.
pub fn integrate_flow_2d(motion: &FlowGrid2d, steps: usize) -> FlowGrid2d {
    let mut out = FlowGrid2d::zeros(motion.width, motion.height);
    if steps == 0 || motion.data.is_empty() {
        return out;
    }
    for y in 0..motion.height {
        for x in 0..motion.width {
            let mut d = [0.0f64; 2];
            for _ in 0..steps {
                let m = motion.sample_bilinear(x as f64 + d[0], y as f64 + d[1]);
                d[0] += m[0];
                d[1] += m[1];
            }
            out.data[y * motion.width + x] = d;
        }
    }
    out
}

/// Per-view flow corruption `v ↦ scale · rotation · v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
}

impl Nuisance {
    pub fn identity() -> Self {
        Nuisance { rotation: Matrix3::identity(), scale: 1.0 }
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.scale * (self.rotation * v)
    }

    /// `(Rᵀ, 1/s)`, the transform alignment should recover.
    pub fn inverse(&self) -> Nuisance {
        Nuisance { rotation: self.rotation.transpose(), scale: 1.0 / self.scale }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub field: AnalyticField,
    pub n_views: usize,
    pub points_per_view: usize,
    /// Rotation angle of each view's nuisance (radians); the axis is random.
    pub nuisance_angle: f64,
    /// Nuisance scale is log-uniform in this range.
    pub nuisance_scale: (f64, f64),
    /// Standard deviation of Gaussian noise added to sample positions (meters).
    pub position_noise: f64,
    pub seed: u64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    pub camera_height: f64,
    /// Camera advance between views as a fraction of the ground footprint width.
    pub view_stride: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            field: AnalyticField::default_scene_field(),
            n_views: 5,
            points_per_view: 2000,
            nuisance_angle: 10f64.to_radians(),
            nuisance_scale: (0.8, 1.25),
            position_noise: 0.0,
            seed: 7,
            image_width: 320,
            image_height: 240,
            focal: 300.0,
            camera_height: 4.0,
            view_stride: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticView {
    pub view_id: u32,
    pub camera: PinholeCamera,
    pub depth: DepthMap,
    /// Visible scene geometry, parallel to `flow_samples`.
    pub points: PointCloud,
    /// Flow vectors in the corrupted per-view frame.
    pub flow_samples: FlowSampleSet,
    pub nuisance: Nuisance,
    /// Index of each sample in the global scene point list.
    pub global_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub views: Vec<SyntheticView>,
    /// Every observed scene point once, with its analytic velocity, tagged with
    /// the first view that saw it.
    pub ground_truth: FlowSampleSet,
}

fn height_at(x: f64, y: f64) -> f64 {
    0.15 * (0.7 * x).sin() * (0.9 * y).cos()
}

fn color_at(p: &Vec3) -> [f32; 3] {
    let h = ((p.z / 0.15) * 0.5 + 0.5) as f32;
    [0.2 + 0.3 * h, 0.35 + 0.4 * (1.0 - h), 0.5 + 0.4 * h]
}

/// Camera looking straight down (world −z), image right = world +x.
fn nadir_rotation() -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Camera for view `i` of the configured trajectory.
pub fn view_camera(config: &SynthConfig, i: usize) -> PinholeCamera {
    let footprint_w = config.image_width as f64 / config.focal * config.camera_height;
    let center = Vec3::new(i as f64 * config.view_stride * footprint_w, 0.0, config.camera_height);
    PinholeCamera::new(
        config.focal,
        config.focal,
        config.image_width as f64 / 2.0,
        config.image_height as f64 / 2.0,
        config.image_width,
        config.image_height,
        Pose::from_center(nadir_rotation(), center).expect("nadir rotation is proper"),
    )
    .expect("synthetic intrinsics are valid")
}

/// Deterministic for a fixed `config.seed`.
pub fn generate_expanding_scene(config: &SynthConfig) -> SyntheticScene {
    assert!(config.n_views >= 1, "at least one view is required");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.camera_height;
    let footprint_w = config.image_width as f64 / config.focal * h;
    let footprint_h = config.image_height as f64 / config.focal * h;
    let spacing = (footprint_w * footprint_h / config.points_per_view.max(1) as f64).sqrt();
    let margin = 0.5;
    let x_min = -footprint_w / 2.0 - margin;
    let x_max = (config.n_views - 1) as f64 * config.view_stride * footprint_w + footprint_w / 2.0 + margin;
    let y_half = footprint_h / 2.0 + margin;

    let nx = ((x_max - x_min) / spacing).ceil() as usize;
    let ny = (2.0 * y_half / spacing).ceil() as usize;
    let mut scene_points = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = x_min + (i as f64 + 0.5) * spacing + rng.random_range(-0.2..0.2) * spacing;
            let y = -y_half + (j as f64 + 0.5) * spacing + rng.random_range(-0.2..0.2) * spacing;
            scene_points.push(Vec3::new(x, y, height_at(x, y)));
        }
    }

    let mut views = Vec::with_capacity(config.n_views);
    let mut ground_truth = FlowSampleSet::default();
    let mut seen = vec![false; scene_points.len()];
    for v in 0..config.n_views {
        let camera = view_camera(config, v);
        let nuisance = if v == 0 {
            Nuisance::identity()
        } else {
            let axis = random_unit(&mut rng);
            let (lo, hi) = config.nuisance_scale;
            let log_scale = if hi > lo { rng.random_range(lo.ln()..hi.ln()) } else { lo.ln() };
            Nuisance {
                rotation: Rotation3::new(axis * config.nuisance_angle).into_inner(),
                scale: log_scale.exp(),
            }
        };

        let mut zbuf: HashMap<(i64, i64), (f64, usize)> = HashMap::new();
        for (gid, p) in scene_points.iter().enumerate() {
            if let Some((cell, depth)) = camera.pixel_cell(p) {
                let slot = zbuf.entry(cell).or_insert((depth, gid));
                if depth < slot.0 {
                    *slot = (depth, gid);
                }
            }
        }
        let mut winners: Vec<((i64, i64), f64, usize)> =
            zbuf.into_iter().map(|(c, (d, g))| (c, d, g)).collect();
        winners.sort_unstable_by_key(|w| w.2);

        let mut depth = DepthMap::invalid(config.image_width, config.image_height);
        let mut samples = FlowSampleSet::default();
        let mut positions = Vec::with_capacity(winners.len());
        let mut colors = Vec::with_capacity(winners.len());
        let mut global_ids = Vec::with_capacity(winners.len());
        for &(cell, d, gid) in &winners {
            depth.set(cell.0 as u32, cell.1 as u32, d);
            let truth = scene_points[gid];
            let mut position = truth;
            if config.position_noise > 0.0 {
                position += config.position_noise
                    * random_unit(&mut rng)
                    * rng.sample::<f64, _>(StandardNormal).abs();
            }
            let velocity = config.field.eval(&truth);
            samples.push(position, nuisance.apply(&velocity), v as u32);
            positions.push(position);
            colors.push(color_at(&truth));
            global_ids.push(gid);
            if !seen[gid] {
                seen[gid] = true;
                ground_truth.push(truth, velocity, v as u32);
            }
        }
        views.push(SyntheticView {
            view_id: v as u32,
            camera,
            depth,
            points: PointCloud { positions, colors: Some(colors) },
            flow_samples: samples,
            nuisance,
            global_ids,
        });
    }
    SyntheticScene { views, ground_truth }
}

/// Fraction of `view`'s samples that reproject inside `previous`'s image.
pub fn overlap_fraction(view: &SyntheticView, previous: &SyntheticView) -> f64 {
    if view.flow_samples.is_empty() {
        return 0.0;
    }
    let inside =
        view.flow_samples.positions.iter().filter(|p| previous.camera.pixel_cell(p).is_some()).count();
    inside as f64 / view.flow_samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{kabsch_init, match_by_reprojection, merge_aligned, refine_alignment};
    use crate::geometry::rotation_angle_between;

    #[test]
    fn field_examples() {
        let uniform = AnalyticField::uniform(Vec3::x());
        assert_eq!(uniform.eval(&Vec3::new(3.0, -2.0, 9.0)), Vec3::x());
        let vortex = AnalyticField::vortex(Vec3::z(), Vec3::zeros(), 1.0);
        assert_eq!(vortex.eval(&Vec3::x()), Vec3::y());
        let sum = AnalyticField::Sum(vec![uniform.clone(), vortex.clone()]);
        assert_eq!(sum.eval(&Vec3::x()), Vec3::new(1.0, 1.0, 0.0));
        let shear =
            AnalyticField::shear(Matrix3::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0), Vec3::zeros());
        assert_eq!(shear.eval(&Vec3::new(0.0, 2.0, 0.0)), Vec3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn vortex_axis_is_normalized() {
        let AnalyticField::Vortex { axis, .. } =
            AnalyticField::vortex(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros(), 1.0)
        else {
            unreachable!()
        };
        assert!((axis.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_is_sum_of_children() {
        let children = vec![
            AnalyticField::vortex(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.5, 0.0, -1.0), 0.3),
            AnalyticField::uniform(Vec3::new(0.1, 0.2, 0.3)),
            AnalyticField::shear(Matrix3::new(0.1, 0.0, 0.2, 0.0, -0.3, 0.0, 0.05, 0.0, 0.0), Vec3::zeros()),
        ];
        let sum = AnalyticField::Sum(children.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = Vec3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let direct = children.iter().fold(Vec3::zeros(), |acc, c| acc + c.eval(&x));
            assert_eq!(sum.eval(&x), direct);
        }
    }

    #[test]
    fn integrate_zero_and_constant_grids() {
        let zero = FlowGrid2d::zeros(8, 6);
        assert!(integrate_flow_2d(&zero, 5).data.iter().all(|d| *d == [0.0, 0.0]));
        let constant = FlowGrid2d::from_fn(20, 10, |_, _| [1.0, 0.0]);
        let out = integrate_flow_2d(&constant, 3);
        assert_eq!(out.get(5, 5), [3.0, 0.0]);
        assert!(integrate_flow_2d(&constant, 0).data.iter().all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn integrate_linear_field_matches_scalar_recurrence() {
        let grid = FlowGrid2d::from_fn(32, 4, |x, _| [0.1 * x as f64, 0.0]);
        let out = integrate_flow_2d(&grid, 4);
        // Independent recurrence: f_t = f_{t-1} + 0.1 (x0 + f_{t-1}).
        let mut f = 0.0f64;
        for _ in 0..4 {
            f += 0.1 * (10.0 + f);
        }
        let got = out.get(10, 2);
        assert!((got[0] - f).abs() < 1e-12, "{} vs {f}", got[0]);
        assert_eq!(got[1], 0.0);
    }

    #[test]
    fn integration_clamps_at_border() {
        let grid = FlowGrid2d::from_fn(5, 5, |_, _| [2.0, 0.0]);
        let out = integrate_flow_2d(&grid, 10);
        // Samples leaving the grid keep reading the border velocity.
        assert_eq!(out.get(0, 0), [20.0, 0.0]);
    }

    #[test]
    fn zero_nuisance_keeps_analytic_flows() {
        let config =
            SynthConfig { nuisance_angle: 0.0, nuisance_scale: (1.0, 1.0), n_views: 3, ..Default::default() };
        let scene = generate_expanding_scene(&config);
        for view in &scene.views {
            for (p, v) in view.flow_samples.positions.iter().zip(&view.flow_samples.vectors) {
                assert_eq!(*v, config.field.eval(p));
            }
        }
    }

    #[test]
    fn single_view_ground_truth_is_that_view() {
        let scene = generate_expanding_scene(&SynthConfig { n_views: 1, ..Default::default() });
        assert_eq!(scene.views.len(), 1);
        assert_eq!(scene.ground_truth, scene.views[0].flow_samples);
    }

    #[test]
    fn inverse_nuisance_recovers_field() {
        let config = SynthConfig::default();
        let scene = generate_expanding_scene(&config);
        for view in &scene.views {
            let inv = view.nuisance.inverse();
            for (p, v) in view.flow_samples.positions.iter().zip(&view.flow_samples.vectors) {
                assert!((inv.apply(v) - config.field.eval(p)).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn consecutive_views_overlap() {
        let scene = generate_expanding_scene(&SynthConfig::default());
        for pair in scene.views.windows(2) {
            let f = overlap_fraction(&pair[1], &pair[0]);
            assert!(f >= 0.3, "overlap {f}");
        }
        assert!(scene.views.iter().all(|v| v.flow_samples.len() > 1500));
    }

    #[test]
    fn depth_map_marks_winners_only() {
        let scene = generate_expanding_scene(&SynthConfig { n_views: 1, ..Default::default() });
        let view = &scene.views[0];
        assert_eq!(view.depth.valid_count(), view.flow_samples.len());
        for p in &view.points.positions {
            let (cell, d) = view.camera.pixel_cell(p).unwrap();
            assert_eq!(view.depth.get(cell.0 as u32, cell.1 as u32), d);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = generate_expanding_scene(&SynthConfig::default());
        let b = generate_expanding_scene(&SynthConfig::default());
        assert_eq!(a, b);
        let c = generate_expanding_scene(&SynthConfig { seed: 8, ..Default::default() });
        assert_ne!(a.views[1].nuisance, c.views[1].nuisance);
    }

    #[test]
    fn alignment_recovers_every_nuisance_inverse() {
        let scene = generate_expanding_scene(&SynthConfig::default());
        let mut accumulated = scene.views[0].flow_samples.clone();
        for view in &scene.views[1..] {
            let current = &view.flow_samples;
            let matches = match_by_reprojection(current, &accumulated, &view.camera);
            assert!(matches.len() > 100);
            let (cur, acc) = matches.matched_vectors(current, &accumulated);
            let init = kabsch_init(&cur, &acc).unwrap();
            let t = refine_alignment(init, &cur, &acc, 300, 0.1).transform;
            let expected = view.nuisance.inverse();
            assert!(rotation_angle_between(&t.rotation, &expected.rotation) < 1e-6);
            assert!((t.scale - expected.scale).abs() / expected.scale < 1e-9);
            accumulated = merge_aligned(current, &matches, &t, &accumulated);
        }
        assert_eq!(accumulated.len(), scene.ground_truth.len());
    }
}
