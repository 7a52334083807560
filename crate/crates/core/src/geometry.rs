//! Pinhole cameras, projection/unprojection and point-cloud primitives.
//!
//! Conventions: the camera frame has +z forward, +x right and +y down. Pixel
//! coordinates have their origin at the top-left of the image and pixel `(i, j)`
//! has its center at the continuous coordinate `(i, j)`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("pose rotation is not a proper rotation (orthonormality residual {residual:e}, det {det})")]
    InvalidRotation { residual: f64, det: f64 },
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("{0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Maximum deviation of `RᵀR` from the identity (infinity norm).
pub fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    orthonormality_residual(r) < tol && (r.determinant() - 1.0).abs() <= tol
}

/// Angle of the relative rotation `aᵀb`, accurate for tiny angles.
///
/// Uses `‖a − b‖_F = 2√2·sin(θ/2)`, which avoids the cancellation of the
/// trace/acos formula near zero.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let chord = (a - b).norm() / (2.0 * std::f64::consts::SQRT_2);
    2.0 * chord.min(1.0).asin()
}

/// World-to-camera rigid transform: `x_cam = rotation · x_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        if !is_rotation(&rotation, 1e-9) {
            return Err(GeometryError::InvalidRotation {
                residual: orthonormality_residual(&rotation),
                det: rotation.determinant(),
            });
        }
        Ok(Pose { rotation, translation })
    }

    /// Pose of a camera centered at `center` whose frame axes, expressed in world
    /// coordinates, are the rows of `rotation`.
    pub fn from_center(rotation: Matrix3<f64>, center: Vec3) -> Result<Self, GeometryError> {
        Pose::new(rotation, -(rotation * center))
    }

    pub fn transform(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn inverse_transform(&self, cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (cam - self.translation)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Row-major 3×4 `[R | t]`.
    #[rustfmt::skip]
    pub fn to_matrix_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn from_matrix_3x4(m: &[f64; 12]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Pose::new(rotation, Vec3::new(m[3], m[7], m[11]))
    }
}

/// Continuous image coordinates plus camera-frame depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        pose: Pose,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!("focal lengths ({fx}, {fy})")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point".into()));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidIntrinsics(format!("image size {width}x{height}")));
        }
        // Re-validate poses built by struct literal.
        let pose = Pose::new(pose.rotation, pose.translation)?;
        Ok(PinholeCamera { fx, fy, cx, cy, width, height, pose })
    }

    /// Projects a world point. Returns `None` (behind camera) when the
    /// camera-frame depth is `≤ 0`.
    pub fn project(&self, point: &Vec3) -> Option<ImagePoint> {
        self.project_camera_frame(&self.pose.transform(point))
    }

    pub fn project_camera_frame(&self, p: &Vec3) -> Option<ImagePoint> {
        if p.z <= 0.0 {
            return None;
        }
        Some(ImagePoint { u: self.fx * p.x / p.z + self.cx, v: self.fy * p.y / p.z + self.cy, depth: p.z })
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        let cam = Vec3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        Ok(self.pose.inverse_transform(&cam))
    }

    /// True when the rounded pixel cell lies inside the image.
    pub fn contains_cell(&self, cell: (i64, i64)) -> bool {
        cell.0 >= 0 && cell.1 >= 0 && cell.0 < self.width as i64 && cell.1 < self.height as i64
    }

    /// Projects and rounds; `None` for behind-camera or out-of-image points.
    pub fn pixel_cell(&self, point: &Vec3) -> Option<((i64, i64), f64)> {
        let p = self.project(point)?;
        let cell = pixel_round(p.u, p.v);
        self.contains_cell(cell).then_some((cell, p.depth))
    }
}

/// Round-half-up (`⌊x + 0.5⌋`) on both coordinates.
pub fn pixel_round(u: f64, v: f64) -> (i64, i64) {
    ((u + 0.5).floor() as i64, (v + 0.5).floor() as i64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub colors: Option<Vec<[f32; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Vec3>, colors: Option<Vec<[f32; 3]>>) -> Result<Self, GeometryError> {
        if !positions.iter().all(|p| p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite("point cloud positions"));
        }
        if let Some(c) = &colors {
            if c.len() != positions.len() {
                return Err(GeometryError::Shape(format!(
                    "{} colors for {} points",
                    c.len(),
                    positions.len()
                )));
            }
        }
        Ok(PointCloud { positions, colors })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Row-major `height × width` camera-frame depths. Values `≤ 0` mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn invalid(width: u32, height: u32) -> Self {
        DepthMap { width, height, values: vec![0.0; (width * height) as usize] }
    }

    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != (width as usize) * (height as usize) {
            return Err(GeometryError::Shape(format!("{} depths for {width}x{height}", values.len())));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("depth map"));
        }
        Ok(DepthMap { width, height, values })
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, depth: f64) {
        self.values[(y * self.width + x) as usize] = depth;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Row-major per-pixel 2D vectors (pixel units).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrid2d {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowGrid2d {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowGrid2d { width, height, data: vec![[0.0; 2]; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        FlowGrid2d { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at a continuous position, clamped to the grid border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 2] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let top = self.get(x0, y0)[k] * (1.0 - fx) + self.get(x1, y0)[k] * fx;
            let bottom = self.get(x0, y1)[k] * (1.0 - fx) + self.get(x1, y1)[k] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_camera() -> PinholeCamera {
        PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 100, 100, Pose::identity()).unwrap()
    }

    #[test]
    fn projects_principal_axis_and_offset_points() {
        let cam = identity_camera();
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, 1.0)), Some(ImagePoint { u: 50.0, v: 50.0, depth: 1.0 }));
        assert_eq!(
            cam.project(&Vec3::new(0.5, 0.0, 1.0)),
            Some(ImagePoint { u: 100.0, v: 50.0, depth: 1.0 })
        );
        assert_eq!(cam.project(&Vec3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(cam.project(&Vec3::new(1.0, 1.0, 0.0)), None);
    }

    #[test]
    fn unprojects_inverse_examples() {
        let cam = identity_camera();
        assert_eq!(cam.unproject(50.0, 50.0, 2.0).unwrap(), Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(cam.unproject(100.0, 50.0, 1.0).unwrap(), Vec3::new(0.5, 0.0, 1.0));
        assert!(matches!(cam.unproject(1.0, 1.0, 0.0), Err(GeometryError::NonPositiveDepth(_))));
        assert!(cam.unproject(1.0, 1.0, -3.0).is_err());
    }

    #[test]
    fn rounds_half_up() {
        assert_eq!(pixel_round(3.4, 7.6), (3, 8));
        assert_eq!(pixel_round(2.5, 2.5), (3, 3));
        assert_eq!(pixel_round(-0.5, 0.0), (0, 0));
        assert_eq!(pixel_round(-0.51, -1.5), (-1, -1));
    }

    #[test]
    fn rejects_invalid_cameras() {
        assert!(PinholeCamera::new(0.0, 1.0, 0.0, 0.0, 1, 1, Pose::identity()).is_err());
        assert!(PinholeCamera::new(1.0, 1.0, 0.0, 0.0, 0, 1, Pose::identity()).is_err());
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflect, Vec3::zeros()).is_err());
        assert!(Pose::new(Matrix3::identity() * 1.001, Vec3::zeros()).is_err());
    }

    fn random_camera(rng: &mut ChaCha8Rng) -> PinholeCamera {
        let axis =
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = Rotation3::new(axis * rng.random_range(0.0..3.0)).into_inner();
        let t =
            Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        PinholeCamera::new(
            rng.random_range(50.0..800.0),
            rng.random_range(50.0..800.0),
            rng.random_range(0.0..640.0),
            rng.random_range(0.0..480.0),
            640,
            480,
            Pose::new(rot, t).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_residual_over_random_cameras() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let cam = random_camera(&mut rng);
            let (u, v, d) =
                (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), rng.random_range(0.1..50.0));
            let world = cam.unproject(u, v, d).unwrap();
            let p = cam.project(&world).unwrap();
            worst = worst.max((p.u - u).abs()).max((p.v - v).abs()).max((p.depth - d).abs());
        }
        assert!(worst < 1e-9, "worst round-trip residual {worst:e}");
    }

    #[test]
    fn pose_composition_matches_identity_camera_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let at_origin = PinholeCamera { pose: Pose::identity(), ..cam };
            let world = Vec3::new(
                rng.random_range(-9.0..9.0),
                rng.random_range(-9.0..9.0),
                rng.random_range(-9.0..9.0),
            );
            assert_eq!(cam.project(&world), at_origin.project(&cam.pose.transform(&world)));
        }
    }

    #[test]
    fn pose_matrix_round_trip() {
        let rot = Rotation3::new(Vec3::new(0.3, -0.2, 0.9)).into_inner();
        let pose = Pose::new(rot, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        assert_eq!(Pose::from_matrix_3x4(&pose.to_matrix_3x4()).unwrap(), pose);
        let c = pose.center();
        assert!(pose.transform(&c).norm() < 1e-12);
    }

    #[test]
    fn small_angle_is_accurate() {
        let a = Rotation3::new(Vec3::new(0.1, 0.2, 0.3)).into_inner();
        let b = a * Rotation3::new(Vec3::new(0.0, 0.0, 1e-9)).into_inner();
        assert!((rotation_angle_between(&a, &b) - 1e-9).abs() < 1e-15);
    }

    #[test]
    fn bilinear_sampling_clamps() {
        let g = FlowGrid2d::from_fn(4, 3, |x, y| [x as f64, y as f64]);
        assert_eq!(g.sample_bilinear(1.5, 0.25), [1.5, 0.25]);
        assert_eq!(g.sample_bilinear(-3.0, 10.0), [0.0, 2.0]);
        assert_eq!(g.sample_bilinear(3.0, 2.0), [3.0, 2.0]);
    }
}
