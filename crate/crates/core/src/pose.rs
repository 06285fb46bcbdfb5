//! Iterative gripper pose estimation from 2-D/3-D point matches.
//!
//! Gauss–Newton on the reprojection error. The pose is updated on the left,
//! `T ← exp(δ) T`, with `δ` a camera-frame screw, so the residual Jacobian of
//! each point is exactly its interaction matrix.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use thiserror::Error;

use crate::camera::{project, CameraIntrinsics, ImagePoint};
use crate::control::interaction_matrix;
use crate::geometry::{integrate_screw, RigidTransform, VelocityScrew};

/// Step norm below which the iteration is considered converged.
pub const STEP_TOLERANCE: f64 = 1e-10;
const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("need at least 4 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("reprojection error could not be reduced after {0} line-search attempts")]
    DivergedPose(usize),
    #[error("a model point lies behind the camera")]
    BehindCamera,
    #[error("degenerate point configuration (normal matrix singular)")]
    DegenerateConfiguration,
}

/// Image observation `b_j` of gripper point `B_j^g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCorrespondence2D3D {
    pub image: ImagePoint,
    pub model: Vector3<f64>,
}

impl PointCorrespondence2D3D {
    pub fn new(image: ImagePoint, model: Vector3<f64>) -> Self {
        Self { image, model }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    /// Model (gripper) frame → camera frame.
    pub pose: RigidTransform,
    /// RMS over points of the reprojection distance (px).
    pub rms_reprojection: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PoseEstimate {
    /// Camera coordinates `(x_j, y_j, z_j)` of the model points.
    pub fn camera_points(&self, model: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        model.iter().map(|b| self.pose.transform_point(b)).collect()
    }
}

/// Sum of squared residuals, or `None` when a point is not in front.
fn cost(matches: &[PointCorrespondence2D3D], k: &CameraIntrinsics, pose: &RigidTransform) -> Option<f64> {
    let mut sum = 0.0;
    for m in matches {
        let p = project(k, &pose.transform_point(&m.model)).ok()?;
        sum += (p.u - m.image.u).powi(2) + (p.v - m.image.v).powi(2);
    }
    Some(sum)
}

fn rms(cost: f64, n: usize) -> f64 {
    (cost / n as f64).sqrt()
}

/// Gauss–Newton reprojection minimizer seeded at `init`.
///
/// Converges when the step norm drops below [`STEP_TOLERANCE`] or the RMS
/// changes by less than `tol` pixels. Reaching `max_iter` returns the current
/// iterate with `converged == false`.
pub fn estimate_pose(
    matches: &[PointCorrespondence2D3D],
    k: &CameraIntrinsics,
    init: &RigidTransform,
    tol: f64,
    max_iter: usize,
) -> Result<PoseEstimate, PoseError> {
    let n = matches.len();
    if n < 4 {
        return Err(PoseError::InsufficientMatches(n));
    }
    let mut pose = *init;
    let mut current = cost(matches, k, &pose).ok_or(PoseError::BehindCamera)?;

    for iteration in 1..=max_iter {
        let mut jac = DMatrix::zeros(2 * n, 6);
        let mut res = DVector::zeros(2 * n);
        for (j, m) in matches.iter().enumerate() {
            let x = pose.transform_point(&m.model);
            let l = interaction_matrix(k, &x).map_err(|_| PoseError::BehindCamera)?;
            let p = project(k, &x).map_err(|_| PoseError::BehindCamera)?;
            jac.fixed_view_mut::<2, 6>(2 * j, 0).copy_from(&l.matrix);
            res[2 * j] = p.u - m.image.u;
            res[2 * j + 1] = p.v - m.image.v;
        }
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let svd = normal.svd(true, true);
        if svd.singular_values.min() <= 1e-12 * svd.singular_values.max() {
            return Err(PoseError::DegenerateConfiguration);
        }
        let rhs = -(&jt * &res);
        let delta = svd.solve(&rhs, 0.0).map_err(|_| PoseError::DegenerateConfiguration)?;
        // Decrease of the cost predicted by the linearized model.
        let predicted = rhs.dot(&delta);
        let delta = Vector6::from_column_slice(delta.as_slice());
        let step = VelocityScrew::from_vector(&delta);

        if delta.norm() < STEP_TOLERANCE {
            let candidate = integrate_screw(&pose, &step, 1.0);
            if let Some(c) = cost(matches, k, &candidate) {
                if c <= current {
                    pose = candidate;
                    current = c;
                }
            }
            return Ok(PoseEstimate {
                pose,
                rms_reprojection: rms(current, n),
                iterations: iteration,
                converged: true,
            });
        }

        let mut scale = 1.0;
        let mut accepted = None;
        let mut hit_depth = false;
        for _ in 0..MAX_HALVINGS {
            let candidate = integrate_screw(&pose, &step.scaled(scale), 1.0);
            match cost(matches, k, &candidate) {
                Some(c) if c <= current => {
                    accepted = Some((candidate, c));
                    break;
                }
                Some(_) => {}
                None => hit_depth = true,
            }
            scale *= 0.5;
        }

        let Some((candidate, c)) = accepted else {
            if hit_depth {
                return Err(PoseError::BehindCamera);
            }
            // At a minimum up to rounding: nothing left to gain.
            if predicted <= 1e-12 * current + 1e-24 {
                return Ok(PoseEstimate {
                    pose,
                    rms_reprojection: rms(current, n),
                    iterations: iteration,
                    converged: true,
                });
            }
            return Err(PoseError::DivergedPose(MAX_HALVINGS));
        };

        let change = (rms(current, n) - rms(c, n)).abs();
        pose = candidate;
        current = c;
        if change < tol {
            return Ok(PoseEstimate {
                pose,
                rms_reprojection: rms(current, n),
                iterations: iteration,
                converged: true,
            });
        }
    }

    Ok(PoseEstimate {
        pose,
        rms_reprojection: rms(current, n),
        iterations: max_iter,
        converged: false,
    })
}

/// Seed for the next frame: the previous frame's pose.
pub fn pose_warm_start(previous: &PoseEstimate) -> RigidTransform {
    previous.pose
}
