//! Pin-hole cameras: intrinsics, projection, Euclidean projection matrices
//! and pixel noise.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;

/// Depth at or below which a point is treated as behind the camera (m).
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CameraError {
    #[error("point depth {0} m is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Pin-hole parameters, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub alpha_u: f64,
    pub alpha_v: f64,
    pub u0: f64,
    pub v0: f64,
}

impl CameraIntrinsics {
    pub fn new(alpha_u: f64, alpha_v: f64, u0: f64, v0: f64) -> Result<Self, CameraError> {
        let k = Self {
            alpha_u,
            alpha_v,
            u0,
            v0,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.alpha_u > 0.0 && self.alpha_v > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal scales must be positive, got alpha_u={} alpha_v={}",
                self.alpha_u, self.alpha_v
            )));
        }
        if !(self.u0.is_finite() && self.v0.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("principal point is not finite".into()));
        }
        Ok(())
    }

    #[rustfmt::skip]
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.alpha_u, 0.0,          self.u0,
            0.0,          self.alpha_v, self.v0,
            0.0,          0.0,          1.0,
        )
    }

    /// All four parameters multiplied by `k` (a zoomed, re-centred sensor).
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha_u: self.alpha_u * k,
            alpha_v: self.alpha_v * k,
            u0: self.u0 * k,
            v0: self.v0 * k,
        }
    }
}

/// Image coordinates in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
}

impl ImagePoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }

    pub fn to_homogeneous(&self) -> Vector3<f64> {
        Vector3::new(self.u, self.v, 1.0)
    }

    pub fn distance(&self, other: &ImagePoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Fixed camera: extrinsics map world coordinates to camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub extrinsics: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

impl CameraPose {
    pub fn new(extrinsics: RigidTransform, intrinsics: CameraIntrinsics) -> Self {
        Self { extrinsics, intrinsics }
    }

    /// Projects a world point.
    pub fn project_world(&self, p_world: &Vector3<f64>) -> Result<ImagePoint, CameraError> {
        project(&self.intrinsics, &self.extrinsics.transform_point(p_world))
    }
}

/// Sensor rectangle `[0, width] × [0, height]` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorRect {
    pub width: f64,
    pub height: f64,
}

impl SensorRect {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn contains(&self, p: &ImagePoint) -> bool {
        p.is_finite() && p.u >= 0.0 && p.u <= self.width && p.v >= 0.0 && p.v <= self.height
    }
}

/// `u = αu x/z + u0`, `v = αv y/z + v0`.
pub fn project(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Result<ImagePoint, CameraError> {
    if p_cam.z <= MIN_DEPTH {
        return Err(CameraError::NonPositiveDepth(p_cam.z));
    }
    Ok(ImagePoint::new(
        k.alpha_u * p_cam.x / p_cam.z + k.u0,
        k.alpha_v * p_cam.y / p_cam.z + k.v0,
    ))
}

/// `K [R | t]` for the given camera.
pub fn euclidean_projection_matrix(c: &CameraPose) -> Matrix3x4<f64> {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&c.extrinsics.rotation);
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&c.extrinsics.translation);
    c.intrinsics.matrix() * rt
}

/// Applies a 3×4 projection matrix to a homogeneous point and dehomogenizes.
///
/// Returns `None` when the image point lies at infinity.
pub fn project_homogeneous(p: &Matrix3x4<f64>, x: &Vector4<f64>) -> Option<ImagePoint> {
    dehomogenize(&(p * x))
}

pub fn dehomogenize(m: &Vector3<f64>) -> Option<ImagePoint> {
    if m.z.abs() < 1e-12 * m.norm().max(f64::MIN_POSITIVE) {
        return None;
    }
    Some(ImagePoint::new(m.x / m.z, m.y / m.z))
}

/// Isotropic Gaussian perturbation with standard deviation `sigma` px per axis.
pub fn add_pixel_noise<R: Rng + ?Sized>(p: &ImagePoint, sigma: f64, rng: &mut R) -> ImagePoint {
    if sigma <= 0.0 {
        return *p;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    ImagePoint::new(p.u + normal.sample(rng), p.v + normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseStreams;

    fn paper_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(1500.0, 1000.0, 256.0, 256.0).unwrap()
    }

    #[test]
    fn on_axis_point_hits_principal_point() {
        let p = project(&paper_intrinsics(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, ImagePoint::new(256.0, 256.0));
    }

    #[test]
    fn off_axis_substitution() {
        let p = project(&paper_intrinsics(), &Vector3::new(0.1, 0.1, 1.0)).unwrap();
        assert!((p.u - 406.0).abs() < 1e-12 && (p.v - 356.0).abs() < 1e-12);
    }

    #[test]
    fn zero_depth_is_rejected() {
        assert!(matches!(
            project(&paper_intrinsics(), &Vector3::zeros()),
            Err(CameraError::NonPositiveDepth(_))
        ));
        assert!(project(&paper_intrinsics(), &Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn invalid_focal_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(10.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn identity_extrinsics_matrix() {
        let c = CameraPose::new(RigidTransform::identity(), paper_intrinsics());
        let m = euclidean_projection_matrix(&c);
        assert_eq!(m.column(3).into_owned(), Vector3::zeros());
        let p = project_homogeneous(&m, &Vector4::new(0.0, 0.0, 1.0, 1.0)).unwrap();
        assert_eq!(p, ImagePoint::new(256.0, 256.0));
    }

    #[test]
    fn matrix_route_matches_direct_projection() {
        let ext = RigidTransform::from_axis_angle(Vector3::new(0.1, -0.3, 0.2), Vector3::new(0.05, -0.1, 1.5));
        let c = CameraPose::new(ext, paper_intrinsics());
        let m = euclidean_projection_matrix(&c);
        for p in [
            Vector3::new(0.1, 0.2, 0.3),
            Vector3::new(-0.2, 0.1, -0.1),
            Vector3::new(0.0, 0.0, 0.5),
        ] {
            let a = c.project_world(&p).unwrap();
            let b = project_homogeneous(&m, &p.push(1.0)).unwrap();
            let b5 = project_homogeneous(&(m * 5.0), &p.push(1.0)).unwrap();
            assert!(a.distance(&b) < 1e-9);
            assert!(b.distance(&b5) < 1e-9);
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let mut rng = NoiseStreams::new(1).stream("test");
        let p = ImagePoint::new(12.5, -3.0);
        assert_eq!(add_pixel_noise(&p, 0.0, &mut rng), p);
    }

    #[test]
    fn noise_is_reproducible() {
        let p = ImagePoint::new(100.0, 200.0);
        let a = add_pixel_noise(&p, 0.5, &mut NoiseStreams::new(42).stream("cam"));
        let b = add_pixel_noise(&p, 0.5, &mut NoiseStreams::new(42).stream("cam"));
        assert_eq!(a.u.to_bits(), b.u.to_bits());
        assert_eq!(a.v.to_bits(), b.v.to_bits());
        let c = add_pixel_noise(&p, 0.5, &mut NoiseStreams::new(42).stream("other"));
        assert_ne!(a, c);
    }

    #[test]
    fn noise_standard_deviation() {
        let mut rng = NoiseStreams::new(7).stream("stats");
        let n = 100_000;
        let origin = ImagePoint::new(0.0, 0.0);
        let (mut su, mut sv, mut su2, mut sv2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let q = add_pixel_noise(&origin, 0.5, &mut rng);
            su += q.u;
            sv += q.v;
            su2 += q.u * q.u;
            sv2 += q.v * q.v;
        }
        let nf = n as f64;
        let std_u = (su2 / nf - (su / nf).powi(2)).sqrt();
        let std_v = (sv2 / nf - (sv / nf).powi(2)).sqrt();
        assert!((0.49..=0.51).contains(&std_u), "{std_u}");
        assert!((0.49..=0.51).contains(&std_v), "{std_v}");
    }

    #[test]
    fn sensor_rectangle() {
        let r = SensorRect::new(512.0, 512.0);
        assert!(r.contains(&ImagePoint::new(0.0, 512.0)));
        assert!(!r.contains(&ImagePoint::new(-0.1, 10.0)));
        assert!(!r.contains(&ImagePoint::new(f64::NAN, 10.0)));
    }
}
