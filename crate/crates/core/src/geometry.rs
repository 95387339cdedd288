//! Camera/projector geometry shared by every other module: pinhole
//! projection, ray generation, rigid transforms, positional encoding and
//! stratified sampling along rays.
//!
//! Conventions (fixed once, used everywhere):
//! - right-handed camera frame, x right, y up, camera looks along -z;
//! - image u grows right, v grows down, so `v = cy - fy * y/(-z)`;
//! - sub-pixel coordinates address pixel centers at integer + 0.5.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({0}, {1}) outside image bounds")]
    OutOfImage(f64, f64),
    #[error("point projects behind the device (depth {0})")]
    PointBehindDevice(f64),
    #[error("projection ({u}, {v}) falls outside the pattern/image plane")]
    OutsidePattern { u: f64, v: f64, depth: f64 },
    #[error("invalid intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("rotation is not orthonormal with det +1")]
    BadRotation,
    #[error("direction is not unit length (|d| = {0})")]
    NotUnit(f64),
    #[error("invalid sample range or count: {0}")]
    BadSampleSpec(String),
}

/// Pinhole intrinsics in pixel units. Used for both the camera and the
/// active-light projector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::BadIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::BadIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square image with the given field of view (degrees) across the width.
    pub fn from_fov(size: usize, fov_deg: f64) -> Result<Self, GeometryError> {
        let half = 0.5 * fov_deg.to_radians();
        let f = size as f64 / (2.0 * half.tan());
        let c = size as f64 / 2.0;
        Self::new(f, f, c, c, size, size)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        (0.0..self.width as f64).contains(&u) && (0.0..self.height as f64).contains(&v)
    }
}

/// Rigid transform interpreted as device-to-world: `x_world = R x_local + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ROTATION_TOL: f64 = 1e-9;

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram[(i, j)] - target).abs());
            }
        }
        if err > ROTATION_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::BadRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target` with the given world up vector.
    /// The camera -z axis points from `eye` toward `target`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let cam_z = -forward;
        let cam_y = cam_z.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, cam_y, cam_z]),
            translation: eye,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` maps frame B to world, `other` maps frame C to frame B;
    /// the result maps frame C to world.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Row-major 4x4 matrix, the layout used by the dataset manifest.
    pub fn to_matrix4_rows(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4_rows(m: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        let rotation = Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::new(rotation, translation)
    }
}

/// A ray in world coordinates with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = direction.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotUnit(n));
        }
        Ok(Self { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Ray through sub-pixel coordinate (u, v). The returned direction is the
/// world-frame unit vector through the pixel under the look-down-minus-z
/// convention; the origin is the device center.
pub fn ray_from_pixel(
    intr: &PinholeIntrinsics,
    pose: &RigidPose,
    pixel: (f64, f64),
) -> Result<Ray, GeometryError> {
    let (u, v) = pixel;
    if !intr.contains(u, v) {
        return Err(GeometryError::OutOfImage(u, v));
    }
    let k = Vector3::new((u - intr.cx) / intr.fx, -(v - intr.cy) / intr.fy, -1.0);
    let direction = pose.rotate(&k).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction,
    })
}

/// Perspective projection of a world point into the device image plane.
///
/// `world_to_device` is the inverse of the device pose. Returns the sub-pixel
/// coordinate and the forward distance in the device frame. A point behind
/// the device or outside the image maps to an error carrying the raw values
/// so the caller can decide how to handle it.
pub fn project_point(
    intr: &PinholeIntrinsics,
    world_to_device: &RigidPose,
    x: &Vector3<f64>,
) -> Result<(Vector2<f64>, f64), GeometryError> {
    let local = world_to_device.transform_point(x);
    let depth = -local.z;
    if depth <= 0.0 {
        return Err(GeometryError::PointBehindDevice(depth));
    }
    let u = intr.cx + intr.fx * local.x / depth;
    let v = intr.cy - intr.fy * local.y / depth;
    if !intr.contains(u, v) {
        return Err(GeometryError::OutsidePattern { u, v, depth });
    }
    Ok((Vector2::new(u, v), depth))
}

/// Sinusoidal positional encoding: for each component c and frequency
/// j in 0..L, emits sin(2^j pi c) and cos(2^j pi c). With `include_input`
/// the raw components are prepended.
pub fn positional_encode(v: &[f64], freqs: usize, include_input: bool) -> Vec<f64> {
    assert!(freqs >= 1, "positional encoding needs at least 1 frequency");
    let mut out = Vec::with_capacity(encoded_len(v.len(), freqs, include_input));
    encode_into(&mut out, v, freqs, include_input);
    out
}

pub fn encoded_len(k: usize, freqs: usize, include_input: bool) -> usize {
    2 * freqs * k + if include_input { k } else { 0 }
}

/// Appends the encoding of `v` to `out`; used by the fields module to fill
/// batch matrices without intermediate allocations.
pub fn encode_into(out: &mut Vec<f64>, v: &[f64], freqs: usize, include_input: bool) {
    if include_input {
        out.extend_from_slice(v);
    }
    for &c in v {
        let mut freq = std::f64::consts::PI;
        for _ in 0..freqs {
            let arg = freq * c;
            out.push(arg.sin());
            out.push(arg.cos());
            freq *= 2.0;
        }
    }
}

/// Per-ray sample positions and spacings within [t_near, t_far].
///
/// The terminal spacing is (t_far - t_near)/N rather than infinity so the
/// last sample keeps finite weight in bounded scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub t_near: f64,
    pub t_far: f64,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

fn sample_grid_from_t(t_near: f64, t_far: f64, t: Vec<f64>) -> SampleGrid {
    let n = t.len();
    let mut delta = Vec::with_capacity(n);
    for i in 0..n - 1 {
        delta.push(t[i + 1] - t[i]);
    }
    delta.push((t_far - t_near) / n as f64);
    SampleGrid {
        t_near,
        t_far,
        t,
        delta,
    }
}

fn check_sample_spec(t_near: f64, t_far: f64, n: usize) -> Result<(), GeometryError> {
    if !(t_far > t_near) {
        return Err(GeometryError::BadSampleSpec(format!(
            "t_far {t_far} must exceed t_near {t_near}"
        )));
    }
    if n == 0 {
        return Err(GeometryError::BadSampleSpec("need at least 1 sample".into()));
    }
    Ok(())
}

/// One uniform draw per equal-width bin.
pub fn stratified_sample<R: Rng>(
    t_near: f64,
    t_far: f64,
    n: usize,
    rng: &mut R,
) -> Result<SampleGrid, GeometryError> {
    check_sample_spec(t_near, t_far, n)?;
    let bin = (t_far - t_near) / n as f64;
    let t = (0..n)
        .map(|i| t_near + (i as f64 + rng.random::<f64>()) * bin)
        .collect();
    Ok(sample_grid_from_t(t_near, t_far, t))
}

/// Deterministic variant: bin centers.
pub fn midpoint_sample(t_near: f64, t_far: f64, n: usize) -> Result<SampleGrid, GeometryError> {
    check_sample_spec(t_near, t_far, n)?;
    let bin = (t_far - t_near) / n as f64;
    let t = (0..n).map(|i| t_near + (i as f64 + 0.5) * bin).collect();
    Ok(sample_grid_from_t(t_near, t_far, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_intr() -> PinholeIntrinsics {
        PinholeIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn principal_point_ray_points_down_minus_z() {
        let ray = ray_from_pixel(&test_intr(), &RigidPose::identity(), (50.0, 50.0)).unwrap();
        assert_relative_eq!(ray.direction, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
        assert_eq!(ray.origin, Vector3::zeros());
    }

    #[test]
    fn ray_origin_is_pose_translation() {
        let pose = RigidPose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let ray = ray_from_pixel(&test_intr(), &pose, (10.0, 20.0)).unwrap();
        assert_eq!(ray.origin, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn off_axis_ray_matches_hand_evaluation() {
        // fx=fy=100, cx=cy=50, pixel (150, 50) -> direction (1,0,-1)/sqrt(2)
        let intr = PinholeIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 200).unwrap();
        let ray = ray_from_pixel(&intr, &RigidPose::identity(), (150.0, 50.0)).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert_relative_eq!(ray.direction, Vector3::new(s, 0.0, -s), epsilon = 1e-12);
    }

    #[test]
    fn pixel_out_of_bounds_rejected() {
        let err = ray_from_pixel(&test_intr(), &RigidPose::identity(), (100.0, 5.0)).unwrap_err();
        assert_eq!(err, GeometryError::OutOfImage(100.0, 5.0));
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let intr = test_intr();
        let (p, depth) = project_point(
            &intr,
            &RigidPose::identity(),
            &Vector3::new(0.0, 0.0, -2.0),
        )
        .unwrap();
        assert_relative_eq!(p, Vector2::new(50.0, 50.0), epsilon = 1e-12);
        assert_relative_eq!(depth, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn point_behind_device_rejected() {
        let err = project_point(
            &test_intr(),
            &RigidPose::identity(),
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, GeometryError::PointBehindDevice(_)));
    }

    #[test]
    fn projection_ray_round_trip() {
        let intr = test_intr();
        let pose = RigidPose::look_at(
            Vector3::new(1.2, -0.7, 2.0),
            Vector3::new(0.1, 0.0, -0.2),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let world_to_cam = pose.inverse();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = (
                rng.random::<f64>() * 100.0,
                rng.random::<f64>() * 100.0,
            );
            let s = 0.1 + rng.random::<f64>() * 5.0;
            let ray = ray_from_pixel(&intr, &pose, q).unwrap();
            let x = ray.at(s);
            let (p, _) = project_point(&intr, &world_to_cam, &x).unwrap();
            assert!(
                (p.x - q.0).abs() < 1e-6 && (p.y - q.1).abs() < 1e-6,
                "round trip failed: {q:?} -> {p:?}"
            );
        }
    }

    #[test]
    fn depth_invariant_under_world_rotation() {
        let intr = test_intr();
        let pose = RigidPose::look_at(
            Vector3::new(0.5, 1.5, 1.0),
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let x = Vector3::new(0.1, -0.2, 0.05);
        let (_, d0) = project_point(&intr, &pose.inverse(), &x).unwrap();

        let angle = 0.83f64;
        let (s, c) = angle.sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let world_rot = RigidPose::new(rot, Vector3::new(0.3, -0.1, 0.9)).unwrap();
        let pose2 = world_rot.compose(&pose);
        let x2 = world_rot.transform_point(&x);
        let (_, d1) = project_point(&intr, &pose2.inverse(), &x2).unwrap();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn encode_zero_vector() {
        let e = positional_encode(&[0.0, 0.0], 3, false);
        for (i, x) in e.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*x, 0.0);
            } else {
                assert_eq!(*x, 1.0);
            }
        }
    }

    #[test]
    fn encode_half_at_l1() {
        let e = positional_encode(&[0.5], 1, false);
        assert_relative_eq!(e[0], 1.0, epsilon = 1e-12); // sin(pi/2)
        assert!(e[1].abs() < 1e-12); // cos(pi/2)
    }

    #[test]
    fn encode_lengths() {
        assert_eq!(positional_encode(&[0.1, 0.2, 0.3], 10, false).len(), 60);
        assert_eq!(positional_encode(&[0.1, 0.2, 0.3], 10, true).len(), 63);
        assert_eq!(encoded_len(3, 10, true), 63);
    }

    #[test]
    fn encode_finite_difference_slope() {
        // d/dc sin(2^j pi c) = 2^j pi cos(2^j pi c), and likewise for cos.
        let c = 0.37;
        let h = 1e-7;
        let freqs = 6;
        let plus = positional_encode(&[c + h], freqs, false);
        let minus = positional_encode(&[c - h], freqs, false);
        for j in 0..freqs {
            let w = 2f64.powi(j as i32) * std::f64::consts::PI;
            let fd_sin = (plus[2 * j] - minus[2 * j]) / (2.0 * h);
            let fd_cos = (plus[2 * j + 1] - minus[2 * j + 1]) / (2.0 * h);
            assert_relative_eq!(fd_sin, w * (w * c).cos(), max_relative = 1e-5, epsilon = 1e-5);
            assert_relative_eq!(fd_cos, -w * (w * c).sin(), max_relative = 1e-5, epsilon = 1e-5);
        }
    }

    #[test]
    fn midpoint_samples() {
        let g = midpoint_sample(0.0, 1.0, 1).unwrap();
        assert_eq!(g.t, vec![0.5]);
        assert_eq!(g.delta, vec![1.0]);

        let g = midpoint_sample(0.0, 1.0, 4).unwrap();
        assert_eq!(g.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_relative_eq!(g.delta[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(g.delta[3], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn stratified_bin_containment_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let g = stratified_sample(0.5, 2.5, 8, &mut rng).unwrap();
            let bin = 2.0 / 8.0;
            for (i, &t) in g.t.iter().enumerate() {
                let lo = 0.5 + i as f64 * bin;
                assert!(t >= lo && t <= lo + bin, "sample {t} escaped bin {i}");
                if i > 0 {
                    assert!(t > g.t[i - 1]);
                }
            }
            assert!(g.t[0] >= g.t_near && *g.t.last().unwrap() <= g.t_far);
        }
    }

    #[test]
    fn bad_rotation_rejected() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.1);
        assert!(RigidPose::new(m, Vector3::zeros()).is_err());
        // Reflection: orthonormal but det -1.
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(RigidPose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_inverse_round_trip() {
        let pose = RigidPose::look_at(
            Vector3::new(2.0, 1.0, 3.0),
            Vector3::new(0.0, 0.5, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let x = Vector3::new(0.3, -0.8, 0.6);
        let back = pose.inverse().transform_point(&pose.transform_point(&x));
        assert_relative_eq!(back, x, epsilon = 1e-12);
    }
}
