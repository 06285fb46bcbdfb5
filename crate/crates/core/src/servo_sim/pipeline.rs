//! Planning and transfer stages: reconstruct the aligned gripper with the
//! planning rig, relate it to the runtime rig through the object, and
//! predict the runtime images of the aligned gripper.

use nalgebra::Vector3;

use crate::camera::{add_pixel_noise, CameraPose, ImagePoint};
use crate::control::FeatureVector;
use crate::geometry::RigidTransform;
use crate::noise::NoiseStreams;
use crate::projective::{
    basis_homography, cameras_from_fundamental, estimate_fundamental, estimate_homography_3d, refine_homography_3d,
    setpoint_from_transfer, transfer_gripper_points, triangulate, FundamentalFit, HomographyMatch,
    ProjectiveCameraPair, ProjectiveHomography, ProjectivePoint, StereoImagePair, StereoSetup, WhichCamera,
};

use super::scenario::{Scenario, Scene, TransferRoute};
use super::SimError;

/// Output of the planning and transfer stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    /// Transferred set-point, one feature vector per runtime camera.
    pub s_star: Vec<FeatureVector>,
    /// Projections of the ideally aligned gripper (simulation only).
    pub ground_truth: Vec<FeatureVector>,
    /// RMS over the coordinates of both runtime set-points of the error
    /// against ground truth (px per coordinate).
    pub rms_error_px: f64,
    /// RMS over gripper points and runtime cameras of the image distance to
    /// ground truth (px); `√2` times `rms_error_px`.
    pub rms_point_error_px: f64,
    pub h_xy: ProjectiveHomography,
    pub planning_fit: FundamentalFit,
    pub runtime_fit: FundamentalFit,
}

const HOMOGRAPHY_REFINE_ITERATIONS: usize = 20;

fn stereo_pair(m: &(ImagePoint, ImagePoint)) -> StereoImagePair {
    StereoImagePair { left: m.0, right: m.1 }
}

/// Noisy images of world points in one camera.
fn image(
    camera: &CameraPose,
    points: &[Vector3<f64>],
    sigma: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<ImagePoint>, SimError> {
    points
        .iter()
        .map(|p| Ok(add_pixel_noise(&camera.project_world(p)?, sigma, rng)))
        .collect()
}

fn to_world(pose: &RigidTransform, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| pose.transform_point(p)).collect()
}

/// Images of `points` in both cameras of a rig, each camera on its own
/// stream. Point `i` always takes the `i`-th draw, so dropping trailing
/// points leaves the noise on the others unchanged.
fn stereo_images(
    rig: &[CameraPose],
    points: &[Vector3<f64>],
    sigma: f64,
    streams: &NoiseStreams,
    stage: &str,
) -> Result<Vec<(ImagePoint, ImagePoint)>, SimError> {
    let left = image(&rig[0], points, sigma, &mut streams.stream(&format!("{stage}-0")))?;
    let right = image(&rig[1], points, sigma, &mut streams.stream(&format!("{stage}-1")))?;
    Ok(left.into_iter().zip(right).collect())
}

fn reconstruct(
    pair: &ProjectiveCameraPair,
    matches: &[(ImagePoint, ImagePoint)],
) -> Result<Vec<ProjectivePoint>, SimError> {
    matches.iter().map(|(l, r)| Ok(triangulate(pair, l, r)?)).collect()
}

/// Projections of gripper points placed at `gripper_pose` into `camera`.
pub fn ground_truth_setpoint(
    scene: &Scene,
    camera: &CameraPose,
    gripper_pose: &RigidTransform,
) -> Result<FeatureVector, SimError> {
    let pts = image_exact(camera, &to_world(gripper_pose, &scene.gripper_points))?;
    Ok(FeatureVector::from_points(&pts)?)
}

fn image_exact(camera: &CameraPose, points: &[Vector3<f64>]) -> Result<Vec<ImagePoint>, SimError> {
    points.iter().map(|p| Ok(camera.project_world(p)?)).collect()
}

/// Runs planning and transfer for a scenario with a planning rig and a
/// two-camera runtime rig.
///
/// Planning images show the gripper aligned with the object at its planning
/// pose; runtime images show the displaced object and the gripper at its
/// initial pose. Both sets of gripper and object matches feed the
/// fundamental-matrix estimates; only object points relate the two
/// reconstructions.
pub fn plan_and_transfer(scenario: &Scenario, scene: &Scene) -> Result<TransferOutcome, SimError> {
    if scene.planning_cameras.len() != 2 || scene.runtime_cameras.len() != 2 {
        return Err(SimError::Setup(
            "transfer needs two planning and two runtime cameras".into(),
        ));
    }
    let streams = NoiseStreams::new(scenario.seed);
    let sigma = scenario.noise_px;
    let n_obj = scene.object_points.len();

    // Planning stage.
    let aligned = scene.object_pose_planning.compose(&scene.grasp_alignment);
    let mut planning_matches = stereo_images(
        &scene.planning_cameras,
        &to_world(&scene.object_pose_planning, &scene.object_points),
        sigma,
        &streams,
        "planning-object",
    )?;
    planning_matches.extend(stereo_images(
        &scene.planning_cameras,
        &to_world(&aligned, &scene.gripper_points),
        sigma,
        &streams,
        "planning-gripper",
    )?);
    let planning_fit = estimate_fundamental(&planning_matches)?;
    let pair_x = cameras_from_fundamental(&planning_fit.fundamental);
    let object_x = reconstruct(&pair_x, &planning_matches[..n_obj])?;
    let setup_x = StereoSetup {
        cameras: pair_x,
        gripper_images: planning_matches[n_obj..].iter().map(stereo_pair).collect(),
    };

    // Runtime reconstruction.
    let mut runtime_matches = stereo_images(
        &scene.runtime_cameras,
        &to_world(&scene.object_pose_runtime, &scene.object_points),
        sigma,
        &streams,
        "runtime-object",
    )?;
    runtime_matches.extend(stereo_images(
        &scene.runtime_cameras,
        &to_world(&scene.initial_gripper_pose, &scene.gripper_points),
        sigma,
        &streams,
        "runtime-gripper",
    )?);
    let runtime_fit = estimate_fundamental(&runtime_matches)?;
    let pair_y = cameras_from_fundamental(&runtime_fit.fundamental);
    let object_y = reconstruct(&pair_y, &runtime_matches[..n_obj])?;

    let h_xy = match scenario.transfer_route {
        TransferRoute::Direct => {
            let pairs: Vec<_> = object_x.iter().copied().zip(object_y.iter().copied()).collect();
            let linear = estimate_homography_3d(&pairs)?;
            let matches: Vec<_> = (0..n_obj)
                .map(|i| HomographyMatch {
                    images_x: stereo_pair(&planning_matches[i]),
                    images_y: stereo_pair(&runtime_matches[i]),
                    point_x: object_x[i],
                    point_y: object_y[i],
                })
                .collect();
            refine_homography_3d(&linear, &matches, &pair_x, &pair_y, HOMOGRAPHY_REFINE_ITERATIONS)?.0
        }
        TransferRoute::Basis => {
            let pick = |pts: &[ProjectivePoint]| scenario.basis_indices.map(|i| pts[i]);
            let h_xo = basis_homography(&pick(&object_x))?;
            let h_yo = basis_homography(&pick(&object_y))?;
            h_yo.inverse().compose(&h_xo)
        }
    };

    let transferred = transfer_gripper_points(&setup_x, &h_xy, &pair_y)?;
    let s_star = vec![
        setpoint_from_transfer(&transferred, WhichCamera::Left)?,
        setpoint_from_transfer(&transferred, WhichCamera::Right)?,
    ];
    let ground_truth = scene
        .runtime_cameras
        .iter()
        .map(|c| ground_truth_setpoint(scene, c, &scene.goal_gripper_pose))
        .collect::<Result<Vec<_>, _>>()?;
    let (mut sq, mut coords) = (0.0, 0usize);
    for (est, truth) in s_star.iter().zip(&ground_truth) {
        sq += (est.coords() - truth.coords()).norm_squared();
        coords += est.coords().len();
    }
    let rms_error_px = (sq / coords as f64).sqrt();
    Ok(TransferOutcome {
        s_star,
        ground_truth,
        rms_error_px,
        rms_point_error_px: rms_error_px * std::f64::consts::SQRT_2,
        h_xy,
        planning_fit,
        runtime_fit,
    })
}
