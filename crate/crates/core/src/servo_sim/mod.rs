//! Closed-loop simulation of grasping with fixed cameras.
//!
//! The gripper state is its displacement `D` relative to its initial frame
//! `F⁰`. A gripper point `B` (gripper coordinates) sits at `D B` in `F⁰` and at
//! `E W₀ D B` in a camera with world→camera map `E`, where `W₀` is the initial
//! gripper pose. Screws are expressed in `F⁰`, so the camera-frame screw of a
//! gripper motion is `Θ(E W₀) T_g` for every step: `Θ` only depends on the
//! initial configuration and is estimated once.

mod pipeline;
mod scenario;
mod trace;

use std::time::Instant;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use thiserror::Error;

use crate::camera::{add_pixel_noise, project, CameraError, CameraPose, ImagePoint, MIN_DEPTH};
use crate::control::{
    control_screw, interaction_matrix, point_jacobian, stack_jacobian, ControlError, ControlGains, FeatureVector,
    ImageJacobian, Matrix2x6,
};
use crate::geometry::{integrate_screw, screw_transform, RigidTransform, ScrewTransform, VelocityScrew};
use crate::noise::NoiseStreams;
use crate::pose::{estimate_pose, pose_warm_start, PointCorrespondence2D3D, PoseError, PoseEstimate};
use crate::projective::ProjectiveError;

pub use pipeline::{ground_truth_setpoint, plan_and_transfer, TransferOutcome};
pub use scenario::{
    CameraSpec, IntrinsicsSpec, JacobianMode, PoseSpec, Scenario, ScenarioError, Scene, SetpointSource, TransferRoute,
    BUNDLED,
};
pub use trace::{linear_fit, LogErrorFit, ServoTrace, TraceRow, CSV_HEADER};

/// Pose-solver settings used inside the loop.
const POSE_TOLERANCE_PX: f64 = 1e-12;
const POSE_MAX_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("gripper point {point} lost by camera {camera} at step {step}")]
    FeatureLost { step: usize, camera: usize, point: usize },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Projective(#[from] ProjectiveError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspResult {
    pub converged: bool,
    /// Error norm on the last trace row (px).
    pub final_error_px: f64,
    /// RMS distance between achieved and ideally aligned gripper points (m).
    pub final_alignment_error_3d: f64,
    pub steps: usize,
}

/// What a call to [`ServoLoop::step`] produced.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// A screw was executed; the loop moved to the next step.
    Moved(TraceRow),
    /// Terminal row: the error fell below the threshold or the step budget ran out.
    Finished { row: TraceRow, converged: bool },
}

/// Per-camera state of the estimator.
#[derive(Debug, Clone)]
struct CameraChannel {
    index: usize,
    camera: CameraPose,
    s_star: FeatureVector,
    image_rng: ChaCha8Rng,
    /// Estimate of the map `F⁰ → camera`, taken at the first step.
    initial_estimate: Option<PoseEstimate>,
    last_estimate: Option<PoseEstimate>,
    theta: Option<ScrewTransform>,
    /// Interaction matrices at the goal (constant mode).
    frozen: Option<Vec<Matrix2x6>>,
}

/// Stepwise servo controller driving the simulated gripper toward `s*`.
#[derive(Debug, Clone)]
pub struct ServoLoop {
    scene: Scene,
    mode: JacobianMode,
    gains: ControlGains,
    dt: f64,
    eps: f64,
    max_steps: usize,
    noise_px: f64,
    actuator_noise: f64,
    init_error: (f64, f64),
    channels: Vec<CameraChannel>,
    pose_rng: ChaCha8Rng,
    actuator_rng: ChaCha8Rng,
    s_star: FeatureVector,
    displacement: RigidTransform,
    step: usize,
    finished: Option<bool>,
}

impl ServoLoop {
    /// `s_star` holds one feature vector per entry of `cameras`, which index
    /// the runtime rig.
    pub fn new(
        scenario: &Scenario,
        scene: Scene,
        cameras: &[usize],
        s_star: Vec<FeatureVector>,
    ) -> Result<ServoLoop, SimError> {
        if cameras.is_empty() || cameras.len() != s_star.len() {
            return Err(SimError::Setup("one set-point per servo camera is required".into()));
        }
        let n = scene.gripper_points.len();
        if s_star.iter().any(|s| s.point_count() != n) {
            return Err(SimError::Setup(format!("set-point must have {n} points per camera")));
        }
        let streams = NoiseStreams::new(scenario.seed);
        let mut channels = Vec::new();
        for (&index, s) in cameras.iter().zip(&s_star) {
            let camera = *scene
                .runtime_cameras
                .get(index)
                .ok_or_else(|| SimError::Setup(format!("no runtime camera {index}")))?;
            channels.push(CameraChannel {
                index,
                camera,
                s_star: s.clone(),
                image_rng: streams.stream(&format!("servo-{index}")),
                initial_estimate: None,
                last_estimate: None,
                theta: None,
                frozen: None,
            });
        }
        let weights = scenario.point_weights.as_ref().map(|w| {
            let per_row: Vec<f64> = cameras.iter().flat_map(|_| w.iter().copied()).collect();
            ControlGains::point_weights(&per_row)
        });
        let gains = ControlGains {
            gain: scenario.gain_per_s,
            weight: weights,
            damping: scenario.damping,
        };
        let stacked = s_star.iter().skip(1).fold(s_star[0].clone(), |acc, s| acc.concat(s));
        Ok(ServoLoop {
            scene,
            mode: scenario.jacobian_mode,
            gains,
            dt: scenario.dt_s,
            eps: scenario.convergence_eps_px,
            max_steps: scenario.max_steps,
            noise_px: scenario.noise_px,
            actuator_noise: scenario.actuator_noise,
            init_error: (scenario.pose_init_error_deg.to_radians(), scenario.pose_init_error_m),
            channels,
            pose_rng: streams.stream("pose-init"),
            actuator_rng: streams.stream("actuator"),
            s_star: stacked,
            displacement: RigidTransform::identity(),
            step: 0,
            finished: None,
        })
    }

    pub fn displacement(&self) -> &RigidTransform {
        &self.displacement
    }

    /// Current world pose of the gripper.
    pub fn gripper_pose(&self) -> RigidTransform {
        self.scene.initial_gripper_pose.compose(&self.displacement)
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn finished(&self) -> Option<bool> {
        self.finished
    }

    /// Screw transforms estimated at the first step, one per camera.
    pub fn thetas(&self) -> Vec<Option<ScrewTransform>> {
        self.channels.iter().map(|c| c.theta).collect()
    }

    /// Map `F⁰ → camera` for a runtime camera.
    fn initial_map(&self, camera: &CameraPose) -> RigidTransform {
        camera.extrinsics.compose(&self.scene.initial_gripper_pose)
    }

    /// Noisy image of the gripper in one channel, failing if any point is
    /// behind the camera or outside the sensor.
    fn observe(&mut self, c: usize) -> Result<Vec<ImagePoint>, SimError> {
        let map = self.initial_map(&self.channels[c].camera).compose(&self.displacement);
        let mut out = Vec::with_capacity(self.scene.gripper_points.len());
        for (j, b) in self.scene.gripper_points.iter().enumerate() {
            let lost = SimError::FeatureLost {
                step: self.step,
                camera: self.channels[c].index,
                point: j,
            };
            let x = map.transform_point(b);
            if x.z <= MIN_DEPTH {
                return Err(lost);
            }
            let p = project(&self.channels[c].camera.intrinsics, &x)?;
            if !self.scene.sensor.contains(&p) {
                return Err(lost);
            }
            out.push(add_pixel_noise(&p, self.noise_px, &mut self.channels[c].image_rng));
        }
        Ok(out)
    }

    fn solve_pose(&self, c: usize, image: &[ImagePoint], init: &RigidTransform) -> Result<PoseEstimate, SimError> {
        let matches: Vec<_> = image
            .iter()
            .zip(&self.scene.gripper_points)
            .map(|(m, b)| PointCorrespondence2D3D::new(*m, *b))
            .collect();
        Ok(estimate_pose(
            &matches,
            &self.channels[c].camera.intrinsics,
            init,
            POSE_TOLERANCE_PX,
            POSE_MAX_ITERATIONS,
        )?)
    }

    fn perturbed_initial_guess(&mut self, truth: &RigidTransform) -> RigidTransform {
        let (angle, dist) = self.init_error;
        let axis: [f64; 3] = UnitSphere.sample(&mut self.pose_rng);
        let dir: [f64; 3] = UnitSphere.sample(&mut self.pose_rng);
        let d = RigidTransform::from_axis_angle(Vector3::from(axis) * angle, Vector3::from(dir) * dist);
        d.compose(truth)
    }

    /// Builds the stacked Ĵ for the current observation; returns it with
    /// the mean pose RMS of any estimates computed.
    #[allow(clippy::needless_range_loop)] // the body calls `&mut self` methods
    fn jacobian(&mut self, images: &[Vec<ImagePoint>]) -> Result<(ImageJacobian, Option<f64>, f64, f64), SimError> {
        let t_pose = Instant::now();
        let mut rms = Vec::new();
        for c in 0..self.channels.len() {
            if self.channels[c].initial_estimate.is_none() {
                let truth = self.initial_map(&self.channels[c].camera);
                let guess = self.perturbed_initial_guess(&truth);
                let est = self.solve_pose(c, &images[c], &guess)?;
                rms.push(est.rms_reprojection);
                let ch = &mut self.channels[c];
                ch.initial_estimate = Some(est);
                ch.last_estimate = Some(est);
                ch.theta = Some(screw_transform(&est.pose));
            } else if self.mode == JacobianMode::Variable {
                let warm = pose_warm_start(self.channels[c].last_estimate.as_ref().expect("set on first step"));
                let est = self.solve_pose(c, &images[c], &warm)?;
                rms.push(est.rms_reprojection);
                self.channels[c].last_estimate = Some(est);
            }
            if self.mode == JacobianMode::Constant && self.channels[c].frozen.is_none() {
                let goal_image = self.channels[c].s_star.points();
                let init = self.channels[c].initial_estimate.expect("set above").pose;
                let goal = self.solve_pose(c, &goal_image, &init)?;
                let ch = &mut self.channels[c];
                let frozen = goal
                    .camera_points(&self.scene.gripper_points)
                    .iter()
                    .map(|x| Ok(interaction_matrix(&ch.camera.intrinsics, x)?.matrix))
                    .collect::<Result<Vec<_>, SimError>>()?;
                ch.frozen = Some(frozen);
            }
        }
        let ms_pose = t_pose.elapsed().as_secs_f64() * 1e3;

        let t_jac = Instant::now();
        let mut blocks = Vec::new();
        for ch in &self.channels {
            let theta = ch.theta.expect("estimated on first step");
            match self.mode {
                JacobianMode::Constant => {
                    for l in ch.frozen.as_ref().expect("frozen on first step") {
                        blocks.push(l * theta.matrix);
                    }
                }
                JacobianMode::Variable => {
                    let est = ch.last_estimate.expect("estimated above");
                    for x in est.camera_points(&self.scene.gripper_points) {
                        blocks.push(point_jacobian(&interaction_matrix(&ch.camera.intrinsics, &x)?, &theta));
                    }
                }
            }
        }
        let ms_jac = t_jac.elapsed().as_secs_f64() * 1e3;
        let mean_rms = (!rms.is_empty()).then(|| rms.iter().sum::<f64>() / rms.len() as f64);
        Ok((stack_jacobian(&blocks), mean_rms, ms_pose, ms_jac))
    }

    fn perturb_screw(&mut self, screw: &VelocityScrew) -> VelocityScrew {
        if self.actuator_noise <= 0.0 {
            return *screw;
        }
        let normal = Normal::new(0.0, self.actuator_noise).expect("finite positive sigma");
        let v = screw.to_vector();
        let noisy = v.map(|c| c * (1.0 + normal.sample(&mut self.actuator_rng)));
        VelocityScrew::from_vector(&noisy)
    }

    /// One iteration of observe → estimate → control → move.
    pub fn step(&mut self) -> Result<StepOutcome, SimError> {
        if self.finished.is_some() {
            return Err(SimError::Setup("servo loop already finished".into()));
        }
        let mut images = Vec::with_capacity(self.channels.len());
        for c in 0..self.channels.len() {
            images.push(self.observe(c)?);
        }
        let flat: Vec<ImagePoint> = images.iter().flatten().copied().collect();
        let s = FeatureVector::from_points(&flat)?;
        let error_px = s.distance(&self.s_star);
        let mut row = TraceRow {
            step: self.step,
            time_s: self.step as f64 * self.dt,
            error_px,
            screw: VelocityScrew::zero(),
            applied_screw: VelocityScrew::zero(),
            displacement: self.displacement,
            pose_rms_px: None,
            ms_pose: 0.0,
            ms_jacobian: 0.0,
            ms_control: 0.0,
            thetas: Vec::new(),
            jacobian: None,
        };
        if error_px < self.eps || self.step >= self.max_steps {
            let converged = error_px < self.eps;
            self.finished = Some(converged);
            return Ok(StepOutcome::Finished { row, converged });
        }

        let (j_hat, pose_rms, ms_pose, ms_jac) = self.jacobian(&images)?;
        let t_ctl = Instant::now();
        let screw = control_screw(&j_hat, &self.gains, &s, &self.s_star)?;
        let applied = self.perturb_screw(&screw);
        row.ms_control = t_ctl.elapsed().as_secs_f64() * 1e3;
        row.screw = screw;
        row.applied_screw = applied;
        row.pose_rms_px = pose_rms;
        row.ms_pose = ms_pose;
        row.ms_jacobian = ms_jac;
        row.thetas = self.channels.iter().map(|c| c.theta.expect("set")).collect();
        row.jacobian = Some(j_hat);

        self.displacement = integrate_screw(&self.displacement, &applied, self.dt);
        self.step += 1;
        Ok(StepOutcome::Moved(row))
    }

    /// Steps until finished, collecting every row.
    pub fn run(&mut self) -> Result<(ServoTrace, GraspResult), SimError> {
        let mut trace = ServoTrace::default();
        loop {
            match self.step()? {
                StepOutcome::Moved(row) => trace.rows.push(row),
                StepOutcome::Finished { row, converged } => {
                    let final_error_px = row.error_px;
                    trace.rows.push(row);
                    let result = GraspResult {
                        converged,
                        final_error_px,
                        final_alignment_error_3d: alignment_error(&self.scene, &self.gripper_pose()),
                        steps: self.step,
                    };
                    return Ok((trace, result));
                }
            }
        }
    }
}

/// RMS over gripper points of the distance between their positions under
/// `gripper_pose` and under the goal pose (m).
pub fn alignment_error(scene: &Scene, gripper_pose: &RigidTransform) -> f64 {
    let n = scene.gripper_points.len() as f64;
    let sq: f64 = scene
        .gripper_points
        .iter()
        .map(|b| (gripper_pose.transform_point(b) - scene.goal_gripper_pose.transform_point(b)).norm_squared())
        .sum();
    (sq / n).sqrt()
}

/// Set-point for the given runtime cameras according to the scenario.
pub fn setpoint(scenario: &Scenario, scene: &Scene, cameras: &[usize]) -> Result<Vec<FeatureVector>, SimError> {
    match scenario.setpoint_source {
        SetpointSource::GroundTruth => cameras
            .iter()
            .map(|&c| ground_truth_setpoint(scene, &scene.runtime_cameras[c], &scene.goal_gripper_pose))
            .collect(),
        SetpointSource::Transfer => {
            let outcome = plan_and_transfer(scenario, scene)?;
            Ok(cameras.iter().map(|&c| outcome.s_star[c].clone()).collect())
        }
    }
}

fn servo_with_cameras(scenario: &Scenario, cameras: &[usize]) -> Result<(ServoTrace, GraspResult), SimError> {
    let scene = scenario.scene()?;
    let s_star = setpoint(scenario, &scene, cameras)?;
    ServoLoop::new(scenario, scene, cameras, s_star)?.run()
}

/// Servo with the scenario's `cameras_used` runtime cameras.
pub fn run_servo(scenario: &Scenario) -> Result<(ServoTrace, GraspResult), SimError> {
    let cameras: Vec<usize> = (0..scenario.cameras_used).collect();
    servo_with_cameras(scenario, &cameras)
}

/// Servo with both runtime cameras stacked into one system.
pub fn run_two_camera_servo(scenario: &Scenario) -> Result<(ServoTrace, GraspResult), SimError> {
    if scenario.runtime_rig.len() != 2 {
        return Err(SimError::Setup("two runtime cameras are required".into()));
    }
    servo_with_cameras(scenario, &[0, 1])
}

/// Plan, transfer and execute; the set-point always comes from transfer.
pub fn run_grasp_pipeline(scenario: &Scenario) -> Result<GraspResult, SimError> {
    let mut scenario = scenario.clone();
    scenario.setpoint_source = SetpointSource::Transfer;
    scenario.validate()?;
    run_servo(&scenario).map(|(_, result)| result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scenario {
        Scenario::bundled("small_displacement").unwrap()
    }

    fn at_goal(mut s: Scenario) -> Scenario {
        s.initial_offset = PoseSpec::default();
        s
    }

    fn single_step_loop(s: &Scenario) -> ServoLoop {
        let scene = s.scene().unwrap();
        let cams: Vec<usize> = (0..s.cameras_used).collect();
        let s_star = setpoint(s, &scene, &cams).unwrap();
        ServoLoop::new(s, scene, &cams, s_star).unwrap()
    }

    #[test]
    fn zero_offset_converges_immediately() {
        let (trace, result) = run_servo(&at_goal(small())).unwrap();
        assert!(result.converged);
        assert_eq!(result.steps, 0);
        assert_eq!(trace.rows.len(), 1);
        assert!(result.final_alignment_error_3d < 1e-12);
    }

    #[test]
    fn equilibrium_gives_zero_screw_in_both_modes() {
        let mut jacobians = Vec::new();
        for mode in [JacobianMode::Variable, JacobianMode::Constant] {
            let mut s = at_goal(small());
            s.jacobian_mode = mode;
            s.convergence_eps_px = 0.0;
            let mut servo = single_step_loop(&s);
            let StepOutcome::Moved(row) = servo.step().unwrap() else {
                panic!("expected a control step");
            };
            assert!(row.error_px <= 1e-9);
            assert!(row.screw.to_vector().norm() <= 1e-9, "{:?}", row.screw);
            jacobians.push(row.jacobian.unwrap().matrix);
        }
        let scale = jacobians[0].amax();
        assert!((&jacobians[0] - &jacobians[1]).amax() <= 1e-9 * scale);
    }

    #[test]
    fn single_small_step_follows_exponential_law() {
        let mut s = small();
        s.initial_offset = PoseSpec {
            rotation_axis: [1.0, 1.0, 0.0],
            rotation_deg: 0.05,
            translation_m: [0.0, 0.0, 0.001],
        };
        s.dt_s = 1e-3;
        s.convergence_eps_px = 0.0;
        let mut servo = single_step_loop(&s);
        let StepOutcome::Moved(first) = servo.step().unwrap() else {
            panic!()
        };
        let StepOutcome::Moved(second) = servo.step().unwrap() else {
            panic!()
        };
        let rate = (first.error_px.ln() - second.error_px.ln()) / s.dt_s;
        assert!((rate - s.gain_per_s).abs() <= 0.05 * s.gain_per_s, "rate {rate}");
    }

    #[test]
    fn error_strictly_decreases_with_fine_steps() {
        let mut s = small();
        s.dt_s = 0.01 / s.gain_per_s;
        s.max_steps = 5000;
        let (trace, result) = run_servo(&s).unwrap();
        assert!(result.converged);
        for w in trace.rows.windows(2) {
            assert!(w[1].error_px < w[0].error_px, "step {}", w[1].step);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let mut s = small();
        s.noise_px = 0.5;
        s.actuator_noise = 0.05;
        s.max_steps = 60;
        let (a, ra) = run_servo(&s).unwrap();
        let (b, rb) = run_servo(&s).unwrap();
        assert_eq!(ra, rb);
        let strip = |t: &ServoTrace| t.rows.iter().map(TraceRow::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        s.seed += 1;
        let (c, _) = run_servo(&s).unwrap();
        assert_ne!(strip(&a), strip(&c));
    }

    #[test]
    fn trace_rows_chain_through_integration() {
        let mut s = small();
        s.actuator_noise = 0.1;
        let (trace, _) = run_servo(&s).unwrap();
        for w in trace.rows.windows(2) {
            let next = integrate_screw(&w[0].displacement, &w[0].applied_screw, s.dt_s);
            assert_eq!(next, w[1].displacement);
        }
        assert!(trace.rows.iter().any(|r| r.applied_screw != r.screw));
    }

    #[test]
    fn theta_is_frozen_at_the_first_step() {
        for mode in [JacobianMode::Variable, JacobianMode::Constant] {
            let mut s = Scenario::bundled("large_displacement").unwrap();
            s.jacobian_mode = mode;
            s.noise_px = 0.3;
            s.max_steps = 80;
            let (trace, _) = run_servo(&s).unwrap();
            let first = &trace.rows[0].thetas;
            assert!(!first.is_empty());
            for row in trace.rows.iter().filter(|r| !r.thetas.is_empty()) {
                assert_eq!(&row.thetas, first);
            }
        }
    }

    #[test]
    fn duplicated_camera_matches_single_camera() {
        let mut s = small();
        s.runtime_rig[1] = s.runtime_rig[0];
        let (single, _) = run_servo(&s).unwrap();
        // Stacking a duplicate scales the error norm by √2.
        s.convergence_eps_px *= std::f64::consts::SQRT_2;
        let (double, _) = run_two_camera_servo(&s).unwrap();
        assert_eq!(single.rows.len(), double.rows.len());
        for (a, b) in single.rows.iter().zip(&double.rows) {
            let da = a.displacement.to_homogeneous();
            let db = b.displacement.to_homogeneous();
            assert!((da - db).amax() <= 1e-9, "step {}", a.step);
            assert!((b.error_px - a.error_px * std::f64::consts::SQRT_2).abs() <= 1e-6);
        }
    }

    #[test]
    fn two_cameras_converge_on_large_displacement() {
        let s = Scenario::bundled("large_displacement").unwrap();
        let (_, result) = run_two_camera_servo(&s).unwrap();
        assert!(result.converged);
        let (trace, _) = run_two_camera_servo(&at_goal(s)).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].screw, VelocityScrew::zero());
    }

    #[test]
    fn leaving_the_sensor_is_reported() {
        let mut s = small();
        s.initial_offset.translation_m = [0.4, 0.0, 0.0];
        assert!(matches!(
            run_servo(&s),
            Err(SimError::FeatureLost { step: 0, camera: 0, .. })
        ));
    }

    #[test]
    fn both_modes_converge_on_small_displacement() {
        for mode in [JacobianMode::Variable, JacobianMode::Constant] {
            let mut s = small();
            s.jacobian_mode = mode;
            let (trace, result) = run_servo(&s).unwrap();
            assert!(result.converged, "{mode:?}");
            assert!(trace.steps() <= s.max_steps);
            assert!(trace.rows.windows(2).all(|w| w[1].time_s > w[0].time_s));
        }
    }

    #[test]
    fn finished_loop_refuses_to_step() {
        let mut servo = single_step_loop(&at_goal(small()));
        assert!(matches!(
            servo.step().unwrap(),
            StepOutcome::Finished { converged: true, .. }
        ));
        assert!(servo.step().is_err());
    }
}
