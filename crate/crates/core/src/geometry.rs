//! Rigid-body transforms, velocity screws and screw-coordinate changes.
//!
//! Conventions used throughout the crate:
//!
//! * A [`RigidTransform`] `(R, t)` is a coordinate map `x' = R x + t`. A
//!   gripper pose "gripper → camera" maps gripper-frame coordinates to
//!   camera-frame coordinates.
//! * A [`VelocityScrew`] `{V, Ω}` is expressed in a fixed reference frame:
//!   a point `p` of the moving body (coordinates in that frame) moves with
//!   `ṗ = V + Ω × p`.
//! * [`integrate_screw`] composes the exponential of the screw on the left of
//!   the pose, so a zero-rotation screw simply adds `V·dt` to the translation.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Below this rotation angle the exponential uses truncated series.
const SERIES_ANGLE: f64 = 1e-4;

/// Orthogonality drift (max abs entry of `R Rᵀ - I`) tolerated before
/// re-projecting onto SO(3).
pub const ORTHOGONALITY_DRIFT: f64 = 1e-9;

/// Skew-symmetric matrix with `skew(a) * b == a.cross(&b)`.
#[rustfmt::skip]
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
         0.0, -a.z,  a.y,
         a.z,  0.0, -a.x,
        -a.y,  a.x,  0.0,
    )
}

/// Rotation + translation acting as `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation given as an axis-angle vector (radians), followed by translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(rotation_from_axis_angle(&axis_angle), translation)
    }

    /// World → camera transform for a camera at `eye` whose optical (z) axis
    /// points at `target`. `up` fixes the roll: the image y axis points away
    /// from it (image rows grow downward).
    ///
    /// Returns `None` when `eye == target` or the viewing direction is
    /// parallel to `up`.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Option<Self> {
        let z = (target - eye).try_normalize(1e-12)?;
        let x = (-up).cross(&z).try_normalize(1e-12)?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Some(Self::new(rotation, -(rotation * eye)))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Largest absolute entry of `R Rᵀ - I`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.rotation * self.rotation.transpose() - Matrix3::identity()).amax()
    }

    /// Nearest rotation (Frobenius sense) to the stored rotation block.
    pub fn orthonormalized(&self) -> RigidTransform {
        RigidTransform::new(nearest_rotation(&self.rotation), self.translation)
    }

    /// Rotation angle of the rotation block, in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_log(&self.rotation).norm()
    }

    /// Checks the orthonormality and unit-determinant invariants.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthogonality_error() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }
}

/// Instantaneous rigid motion `{V, Ω}`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityScrew {
    /// Linear part (m/s): velocity of the point at the reference origin.
    pub linear: Vector3<f64>,
    /// Angular velocity (rad/s).
    pub angular: Vector3<f64>,
}

impl VelocityScrew {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Stacked as `(V, Ω)`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.linear * k, self.angular * k)
    }

    /// Velocity of the body point currently at `p`.
    pub fn point_velocity(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.linear + self.angular.cross(p)
    }
}

/// 6×6 operator carrying screws from one frame to another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrewTransform {
    pub matrix: Matrix6<f64>,
}

impl ScrewTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix6::identity(),
        }
    }

    pub fn apply(&self, screw: &VelocityScrew) -> VelocityScrew {
        VelocityScrew::from_vector(&(self.matrix * screw.to_vector()))
    }
}

/// Screw change of frame induced by the coordinate map `d = (R, t)`.
///
/// Returns `[[R, S(t) R], [0, R]]` (equivalently `[[R, R S(Rᵀt)], [0, R]]`).
/// If `T` is a screw expressed in the source frame of `d`, `Θ T` is the same
/// motion expressed in the target frame, so that the finite displacements are
/// conjugated: `D_target = d · D_source · d⁻¹`.
pub fn screw_transform(d: &RigidTransform) -> ScrewTransform {
    let r = d.rotation;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&d.translation) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    ScrewTransform { matrix: m }
}

/// Rodrigues formula for an axis-angle vector.
pub fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let s = skew(w);
    let (a, b) = if theta2.sqrt() < SERIES_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        let half = (0.5 * theta).sin() / theta;
        (theta.sin() / theta, 2.0 * half * half)
    };
    Matrix3::identity() + s * a + s * s * b
}

/// Inverse of [`rotation_from_axis_angle`] for angles in `[0, π]`.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let axis_sin = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let cos = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let sin = axis_sin.norm();
    let theta = sin.atan2(cos);
    if theta < SERIES_ANGLE {
        return axis_sin * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return axis_sin * (theta / sin);
    }
    // Near π: axis from the symmetric part, sign from the antisymmetric part.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let (mut best, mut norm) = (Vector3::x(), 0.0);
    for c in 0..3 {
        let col = sym.column(c).into_owned();
        if col.norm() > norm {
            norm = col.norm();
            best = col;
        }
    }
    let mut axis = best / norm;
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Projection onto SO(3) via SVD, preserving the sign of the determinant.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

/// Closed-form rigid exponential of `screw · dt`.
pub fn screw_exponential(screw: &VelocityScrew, dt: f64) -> RigidTransform {
    let w = screw.angular * dt;
    let v = screw.linear * dt;
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let s = skew(&w);
    let rotation = rotation_from_axis_angle(&w);
    let (b, c) = if theta < SERIES_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let half = (0.5 * theta).sin() / theta;
        (2.0 * half * half, (theta - theta.sin()) / (theta2 * theta))
    };
    let coupling = Matrix3::identity() + s * b + s * s * c;
    RigidTransform::new(rotation, coupling * v)
}

/// Advances `pose` by the constant screw over `dt`: `exp(T dt) ∘ pose`.
///
/// The screw is expressed in the pose's target frame. Re-projects the rotation
/// when accumulated drift exceeds [`ORTHOGONALITY_DRIFT`].
pub fn integrate_screw(pose: &RigidTransform, screw: &VelocityScrew, dt: f64) -> RigidTransform {
    let next = screw_exponential(screw, dt).compose(pose);
    if next.orthogonality_error() > ORTHOGONALITY_DRIFT {
        next.orthonormalized()
    } else {
        next
    }
}
