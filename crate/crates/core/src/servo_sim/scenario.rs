//! Scenario files: JSON with units in the field names, parsed into a
//! [`Scene`] of concrete poses and cameras.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraIntrinsics, CameraPose, SensorRect};
use crate::geometry::RigidTransform;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}invalid `{field}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid {
        field: &'static str,
        message: String,
        line: Option<usize>,
    },
}

impl ScenarioError {
    fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        ScenarioError::Invalid {
            field,
            message: message.into(),
            line: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSpec {
    pub alpha_u_px: f64,
    pub alpha_v_px: f64,
    pub u0_px: f64,
    pub v0_px: f64,
}

impl IntrinsicsSpec {
    pub fn to_intrinsics(&self) -> Result<CameraIntrinsics, ScenarioError> {
        CameraIntrinsics::new(self.alpha_u_px, self.alpha_v_px, self.u0_px, self.v0_px)
            .map_err(|e| ScenarioError::invalid("intrinsics", e.to_string()))
    }
}

/// A fixed camera placed at `position_m`, looking at `look_at_m`, with `up`
/// mapping to the negative image `v` direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub intrinsics: IntrinsicsSpec,
    pub position_m: [f64; 3],
    pub look_at_m: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

impl CameraSpec {
    pub fn to_camera(&self) -> Result<CameraPose, ScenarioError> {
        let extrinsics = RigidTransform::look_at(&self.position_m.into(), &self.look_at_m.into(), &self.up.into())
            .ok_or_else(|| ScenarioError::invalid("look_at_m", "camera position, target and up are degenerate"))?;
        Ok(CameraPose::new(extrinsics, self.intrinsics.to_intrinsics()?))
    }
}

/// Rigid transform `x' = R x + t` with `R` a rotation of `rotation_deg` about
/// `rotation_axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default = "default_axis")]
    pub rotation_axis: [f64; 3],
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub translation_m: [f64; 3],
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

impl Default for PoseSpec {
    fn default() -> Self {
        Self {
            rotation_axis: default_axis(),
            rotation_deg: 0.0,
            translation_m: [0.0; 3],
        }
    }
}

impl PoseSpec {
    pub fn to_transform(&self) -> Result<RigidTransform, ScenarioError> {
        let axis = Vector3::from(self.rotation_axis);
        if self.rotation_deg != 0.0 && !(axis.norm() > 0.0) {
            return Err(ScenarioError::invalid("rotation_axis", "axis must be nonzero"));
        }
        let w = if self.rotation_deg == 0.0 {
            Vector3::zeros()
        } else {
            axis.normalize() * self.rotation_deg.to_radians()
        };
        Ok(RigidTransform::from_axis_angle(w, self.translation_m.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Ĵ frozen at the goal configuration.
    Constant,
    /// Ĵ rebuilt every step from a fresh pose estimate.
    #[default]
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetpointSource {
    /// Project the ideal gripper placement through the runtime cameras.
    #[default]
    GroundTruth,
    /// Plan with the planning rig and transfer through a 3-D homography.
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferRoute {
    /// Least-squares homography over all shared object points.
    #[default]
    Direct,
    /// Composition through the five designated basis points.
    Basis,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Gripper points in the gripper frame.
    pub gripper_points_m: Vec<[f64; 3]>,
    /// Object points in the object frame.
    pub object_points_m: Vec<[f64; 3]>,
    #[serde(default = "default_basis")]
    pub basis_indices: [usize; 5],
    /// Stereo rig imaging the gripper aligned with the object (planning stage).
    #[serde(default)]
    pub planning_rig: Option<Vec<CameraSpec>>,
    /// Cameras observing execution; the first one drives one-camera servoing.
    pub runtime_rig: Vec<CameraSpec>,
    pub image_width_px: f64,
    pub image_height_px: f64,
    /// Object → world during planning.
    #[serde(default)]
    pub object_pose: PoseSpec,
    /// World-frame displacement of the object between planning and execution.
    #[serde(default)]
    pub object_motion: PoseSpec,
    /// Gripper → object placement of a successful grasp.
    #[serde(default)]
    pub grasp_alignment: PoseSpec,
    /// Start pose relative to the goal: the gripper is rotated about its own
    /// origin by the world-axis rotation, then translated in world axes.
    #[serde(default)]
    pub initial_offset: PoseSpec,
    #[serde(default = "default_gain")]
    pub gain_per_s: f64,
    /// One weight per gripper point, applied to both of its rows.
    #[serde(default)]
    pub point_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub jacobian_mode: JacobianMode,
    #[serde(default = "default_cameras")]
    pub cameras_used: usize,
    /// Per-axis Gaussian pixel noise on every synthetic image.
    #[serde(default)]
    pub noise_px: f64,
    /// Relative standard deviation of a per-component multiplicative
    /// perturbation of each executed screw.
    #[serde(default)]
    pub actuator_noise: f64,
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_eps")]
    pub convergence_eps_px: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub setpoint_source: SetpointSource,
    #[serde(default)]
    pub transfer_route: TransferRoute,
    /// Rotation error of the initial guess handed to the pose solver.
    #[serde(default = "default_init_deg")]
    pub pose_init_error_deg: f64,
    /// Translation error of the initial guess handed to the pose solver.
    #[serde(default = "default_init_m")]
    pub pose_init_error_m: f64,
}

fn default_basis() -> [usize; 5] {
    [0, 1, 2, 3, 4]
}
fn default_gain() -> f64 {
    1.0
}
fn default_cameras() -> usize {
    1
}
fn default_dt() -> f64 {
    0.1
}
fn default_max_steps() -> usize {
    500
}
fn default_eps() -> f64 {
    0.1
}
fn default_init_deg() -> f64 {
    3.0
}
fn default_init_m() -> f64 {
    0.03
}

const SMALL_DISPLACEMENT: &str = include_str!("../../scenarios/small_displacement.json");
const LARGE_DISPLACEMENT: &str = include_str!("../../scenarios/large_displacement.json");
const GRASP: &str = include_str!("../../scenarios/grasp.json");
const TRANSFER_SWEEP: &str = include_str!("../../scenarios/transfer_sweep.json");

/// Names accepted by [`Scenario::bundled`].
pub const BUNDLED: [&str; 4] = ["small_displacement", "large_displacement", "grasp", "transfer_sweep"];

impl Scenario {
    /// Parses and validates a scenario. Validation failures carry the line
    /// of the offending field when it can be located in `text`.
    pub fn from_json_str(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate().map_err(|e| match e {
            ScenarioError::Invalid { field, message, .. } => ScenarioError::Invalid {
                field,
                message,
                line: field_line(text, field),
            },
            other => other,
        })?;
        Ok(scenario)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario is always serializable")
    }

    pub fn bundled(name: &str) -> Option<Scenario> {
        let text = match name {
            "small_displacement" => SMALL_DISPLACEMENT,
            "large_displacement" => LARGE_DISPLACEMENT,
            "grasp" => GRASP,
            "transfer_sweep" => TRANSFER_SWEEP,
            _ => return None,
        };
        Some(Scenario::from_json_str(text).expect("bundled scenarios are valid"))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let gripper: Vec<Vector3<f64>> = self.gripper_points_m.iter().map(|p| Vector3::from(*p)).collect();
        if gripper.len() < 4 {
            return Err(ScenarioError::invalid(
                "gripper_points_m",
                format!("need at least 4 points for pose estimation, got {}", gripper.len()),
            ));
        }
        if !spans_plane(&gripper) {
            return Err(ScenarioError::invalid("gripper_points_m", "points are collinear"));
        }
        if self.object_points_m.len() < 5 {
            return Err(ScenarioError::invalid(
                "object_points_m",
                format!("need at least 5 points, got {}", self.object_points_m.len()),
            ));
        }
        let mut seen = self.basis_indices;
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) || seen[4] >= self.object_points_m.len() {
            return Err(ScenarioError::invalid(
                "basis_indices",
                "indices must be distinct and refer to object points",
            ));
        }
        if self.runtime_rig.is_empty() || self.runtime_rig.len() > 2 {
            return Err(ScenarioError::invalid("runtime_rig", "expected one or two cameras"));
        }
        if !(1..=self.runtime_rig.len()).contains(&self.cameras_used) {
            return Err(ScenarioError::invalid(
                "cameras_used",
                format!("must be 1..={}, got {}", self.runtime_rig.len(), self.cameras_used),
            ));
        }
        for c in &self.runtime_rig {
            c.to_camera()?;
        }
        if let Some(rig) = &self.planning_rig {
            if rig.len() != 2 {
                return Err(ScenarioError::invalid("planning_rig", "expected exactly two cameras"));
            }
            for c in rig {
                c.to_camera()?;
            }
        }
        if self.setpoint_source == SetpointSource::Transfer {
            if self.planning_rig.is_none() {
                return Err(ScenarioError::invalid(
                    "planning_rig",
                    "required by the transfer set-point",
                ));
            }
            if self.runtime_rig.len() != 2 {
                return Err(ScenarioError::invalid(
                    "runtime_rig",
                    "transfer needs a two-camera runtime rig",
                ));
            }
        }
        for p in [
            &self.object_pose,
            &self.object_motion,
            &self.grasp_alignment,
            &self.initial_offset,
        ] {
            p.to_transform()?;
        }
        let positive = [
            ("image_width_px", self.image_width_px),
            ("image_height_px", self.image_height_px),
            ("gain_per_s", self.gain_per_s),
            ("dt_s", self.dt_s),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScenarioError::invalid(field, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("damping", self.damping),
            ("noise_px", self.noise_px),
            ("actuator_noise", self.actuator_noise),
            ("convergence_eps_px", self.convergence_eps_px),
            ("pose_init_error_deg", self.pose_init_error_deg),
            ("pose_init_error_m", self.pose_init_error_m),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ScenarioError::invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        if let Some(w) = &self.point_weights {
            if w.len() != gripper.len() || w.iter().any(|x| !(*x >= 0.0)) {
                return Err(ScenarioError::invalid(
                    "point_weights",
                    "need one non-negative weight per gripper point",
                ));
            }
        }
        Ok(())
    }

    /// Concrete geometry of the scenario.
    pub fn scene(&self) -> Result<Scene, ScenarioError> {
        self.validate()?;
        let object_pose_planning = self.object_pose.to_transform()?;
        let object_pose_runtime = self.object_motion.to_transform()?.compose(&object_pose_planning);
        let grasp_alignment = self.grasp_alignment.to_transform()?;
        let goal = object_pose_runtime.compose(&grasp_alignment);
        let offset = self.initial_offset.to_transform()?;
        let initial = RigidTransform::new(offset.rotation * goal.rotation, goal.translation + offset.translation);
        let planning_cameras = match &self.planning_rig {
            Some(rig) => rig.iter().map(CameraSpec::to_camera).collect::<Result<_, _>>()?,
            None => Vec::new(),
        };
        Ok(Scene {
            gripper_points: self.gripper_points_m.iter().map(|p| Vector3::from(*p)).collect(),
            object_points: self.object_points_m.iter().map(|p| Vector3::from(*p)).collect(),
            planning_cameras,
            runtime_cameras: self
                .runtime_rig
                .iter()
                .map(CameraSpec::to_camera)
                .collect::<Result<_, _>>()?,
            sensor: SensorRect::new(self.image_width_px, self.image_height_px),
            object_pose_planning,
            object_pose_runtime,
            grasp_alignment,
            goal_gripper_pose: goal,
            initial_gripper_pose: initial,
        })
    }
}

fn spans_plane(points: &[Vector3<f64>]) -> bool {
    let p0 = points[0];
    let scale = points.iter().map(|p| (p - p0).norm()).fold(0.0, f64::max);
    points.iter().any(|a| {
        points
            .iter()
            .any(|b| (a - p0).cross(&(b - p0)).norm() > 1e-9 * scale * scale.max(f64::MIN_POSITIVE))
    })
}

/// 1-based line of the first `"field"` key in `text`.
fn field_line(text: &str, field: &str) -> Option<usize> {
    let key = format!("\"{field}\"");
    text.lines().position(|l| l.contains(&key)).map(|i| i + 1)
}

/// World-frame geometry resolved from a [`Scenario`].
///
/// Poses map local coordinates to world coordinates; camera extrinsics map
/// world coordinates to camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gripper_points: Vec<Vector3<f64>>,
    pub object_points: Vec<Vector3<f64>>,
    pub planning_cameras: Vec<CameraPose>,
    pub runtime_cameras: Vec<CameraPose>,
    pub sensor: SensorRect,
    pub object_pose_planning: RigidTransform,
    pub object_pose_runtime: RigidTransform,
    /// Gripper → object.
    pub grasp_alignment: RigidTransform,
    pub goal_gripper_pose: RigidTransform,
    pub initial_gripper_pose: RigidTransform,
}
