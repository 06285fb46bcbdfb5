//! Interaction matrices, the independent-eye image Jacobian and the weighted
//! pseudo-inverse control law.
//!
//! The camera is fixed; the gripper moves. For a gripper point with camera
//! coordinates `(x, y, z)` the image velocity is `J_j T_g` with
//! `J_j = L_j Θ^gc`, where `T_g` is the gripper screw expressed in the initial
//! gripper frame and `Θ^gc` is the screw transform of the initial
//! gripper → camera pose. `Θ^gc` is constant over a servo run; only `L_j`
//! varies with the point's depth.

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::camera::{CameraIntrinsics, ImagePoint, MIN_DEPTH};
use crate::geometry::{ScrewTransform, VelocityScrew};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Relative singular-value floor of the normal matrix.
pub const SINGULAR_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("point depth {0} m is not in front of the camera")]
    NonPositiveDepth(f64),
    #[error("normal matrix is singular (singular value ratio {0:e})")]
    SingularJacobian(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("invalid feature vector: {0}")]
    InvalidFeatures(String),
}

/// 2×6 map from a camera-frame screw to the image velocity of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionMatrix {
    pub matrix: Matrix2x6,
}

/// Stacked `2n × 6` Jacobian, rows ordered `(u1, v1, …, un, vn)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageJacobian {
    pub matrix: DMatrix<f64>,
    pub point_count: usize,
}

impl ImageJacobian {
    /// Rows `2j, 2j+1`.
    pub fn block(&self, j: usize) -> Matrix2x6 {
        self.matrix.fixed_view::<2, 6>(2 * j, 0).into_owned()
    }

    pub fn singular_values(&self) -> DVector<f64> {
        self.matrix.clone().svd(false, false).singular_values
    }

    /// Numerical rank with a relative threshold on the singular values.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let sv = self.singular_values();
        let max = sv.max();
        sv.iter().filter(|&&s| s > rel_tol * max).count()
    }

    /// Vertically concatenates two Jacobians (two cameras, one gripper).
    pub fn stacked_with(&self, other: &ImageJacobian) -> ImageJacobian {
        let rows = self.matrix.nrows() + other.matrix.nrows();
        let mut m = DMatrix::zeros(rows, 6);
        m.rows_mut(0, self.matrix.nrows()).copy_from(&self.matrix);
        m.rows_mut(self.matrix.nrows(), other.matrix.nrows())
            .copy_from(&other.matrix);
        ImageJacobian {
            matrix: m,
            point_count: self.point_count + other.point_count,
        }
    }
}

/// Image feature vector `(u1, v1, …, un, vn)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    coords: DVector<f64>,
}

impl FeatureVector {
    pub fn new(coords: DVector<f64>) -> Result<Self, ControlError> {
        if !coords.len().is_multiple_of(2) {
            return Err(ControlError::InvalidFeatures(format!("odd length {}", coords.len())));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(ControlError::InvalidFeatures("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn from_points(points: &[ImagePoint]) -> Result<Self, ControlError> {
        Self::new(DVector::from_iterator(
            2 * points.len(),
            points.iter().flat_map(|p| [p.u, p.v]),
        ))
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn point_count(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn point(&self, j: usize) -> ImagePoint {
        ImagePoint::new(self.coords[2 * j], self.coords[2 * j + 1])
    }

    pub fn points(&self) -> Vec<ImagePoint> {
        (0..self.point_count()).map(|j| self.point(j)).collect()
    }

    pub fn concat(&self, other: &FeatureVector) -> FeatureVector {
        let mut c = DVector::zeros(self.coords.len() + other.coords.len());
        c.rows_mut(0, self.coords.len()).copy_from(&self.coords);
        c.rows_mut(self.coords.len(), other.coords.len())
            .copy_from(&other.coords);
        FeatureVector { coords: c }
    }

    /// `‖self - other‖` in pixels.
    pub fn distance(&self, other: &FeatureVector) -> f64 {
        (&self.coords - &other.coords).norm()
    }
}

/// Gain, optional weighting matrix and damping of the control law.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGains {
    /// Convergence rate `g` (1/s).
    pub gain: f64,
    /// `2n × 2n` symmetric weight; `None` means identity.
    pub weight: Option<DMatrix<f64>>,
    /// Levenberg-style damping added to `ĴᵀWĴ`.
    pub damping: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            gain: 1.0,
            weight: None,
            damping: 0.0,
        }
    }
}

impl ControlGains {
    pub fn with_gain(gain: f64) -> Self {
        Self {
            gain,
            ..Self::default()
        }
    }

    /// Diagonal weight giving both rows of point `j` the weight `w[j]`.
    pub fn point_weights(w: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(2 * w.len(), w.iter().flat_map(|&x| [x, x])))
    }

    pub fn validate(&self, rows: usize) -> Result<(), ControlError> {
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(ControlError::InvalidGains(format!(
                "gain must be positive, got {}",
                self.gain
            )));
        }
        if !(self.damping >= 0.0) {
            return Err(ControlError::InvalidGains(format!(
                "damping must be >= 0, got {}",
                self.damping
            )));
        }
        if let Some(w) = &self.weight {
            if w.nrows() != rows || w.ncols() != rows {
                return Err(ControlError::DimensionMismatch(format!(
                    "weight is {}x{}, expected {rows}x{rows}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            if (w - w.transpose()).amax() > 1e-12 {
                return Err(ControlError::InvalidGains("weight is not symmetric".into()));
            }
            let eig = w.clone().symmetric_eigen().eigenvalues;
            if eig.iter().any(|&e| e < -1e-12) || eig.max() <= 0.0 {
                return Err(ControlError::InvalidGains(
                    "weight is not positive semi-definite".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Closed-form interaction matrix of a point at camera coordinates `p_cam`.
#[rustfmt::skip]
pub fn interaction_matrix(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Result<InteractionMatrix, ControlError> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    if z <= MIN_DEPTH {
        return Err(ControlError::NonPositiveDepth(z));
    }
    let z2 = z * z;
    let (au, av) = (k.alpha_u, k.alpha_v);
    let matrix = Matrix2x6::new(
        au / z, 0.0,    -au * x / z2, -au * x * y / z2,        au * (1.0 + x * x / z2), -au * y / z,
        0.0,    av / z, -av * y / z2, -av * (1.0 + y * y / z2), av * x * y / z2,         av * x / z,
    );
    Ok(InteractionMatrix { matrix })
}

/// `J_j = L_j Θ^gc`.
pub fn point_jacobian(l: &InteractionMatrix, theta: &ScrewTransform) -> Matrix2x6 {
    l.matrix * theta.matrix
}

/// Row-block concatenation in point order.
pub fn stack_jacobian(blocks: &[Matrix2x6]) -> ImageJacobian {
    let mut m = DMatrix::zeros(2 * blocks.len(), 6);
    for (j, b) in blocks.iter().enumerate() {
        m.fixed_view_mut::<2, 6>(2 * j, 0).copy_from(b);
    }
    ImageJacobian {
        matrix: m,
        point_count: blocks.len(),
    }
}

/// `T_g = g (ĴᵀWĴ + λI)⁻¹ ĴᵀW (s* − s)`.
pub fn control_screw(
    j_hat: &ImageJacobian,
    gains: &ControlGains,
    s: &FeatureVector,
    s_star: &FeatureVector,
) -> Result<VelocityScrew, ControlError> {
    let rows = j_hat.matrix.nrows();
    if s.coords.len() != rows || s_star.coords.len() != rows {
        return Err(ControlError::DimensionMismatch(format!(
            "jacobian has {rows} rows, features have {} and {}",
            s.coords.len(),
            s_star.coords.len()
        )));
    }
    gains.validate(rows)?;
    let error = &s_star.coords - &s.coords;
    let jt_w = match &gains.weight {
        Some(w) => j_hat.matrix.transpose() * w,
        None => j_hat.matrix.transpose(),
    };
    let normal: Matrix6<f64> =
        (&jt_w * &j_hat.matrix).fixed_view::<6, 6>(0, 0).into_owned() + Matrix6::identity() * gains.damping;
    let rhs: Vector6<f64> = (&jt_w * error).fixed_rows::<6>(0).into_owned();
    let svd = normal.svd(true, true);
    let sv = svd.singular_values;
    let ratio = if sv.max() > 0.0 { sv.min() / sv.max() } else { 0.0 };
    if ratio < SINGULAR_RATIO {
        return Err(ControlError::SingularJacobian(ratio));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| ControlError::SingularJacobian(if e.is_empty() { ratio } else { 0.0 }))?;
    Ok(VelocityScrew::from_vector(&(sol * gains.gain)))
}

/// First-order pixel error `du = αu (dx/z − x dz/z²)` caused by a 3-D error
/// `(dx, dz)` at camera coordinates `p_cam`.
pub fn pixel_sensitivity(k: &CameraIntrinsics, p_cam: &Vector3<f64>, dx: f64, dz: f64) -> Result<f64, ControlError> {
    let (x, z) = (p_cam.x, p_cam.z);
    if z <= MIN_DEPTH {
        return Err(ControlError::NonPositiveDepth(z));
    }
    Ok(k.alpha_u * (dx / z - x * dz / (z * z)))
}
