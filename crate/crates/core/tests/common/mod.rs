//! Scenario fixtures shared by the integration targets.
#![allow(dead_code)]

use vgrasp_core::servo_sim::{plan_and_transfer, Scenario};

pub fn grasp() -> Scenario {
    Scenario::bundled("grasp").expect("bundled grasp scenario")
}

/// Grasp scenario without image noise, servoed to a tight tolerance.
pub fn noiseless_grasp() -> Scenario {
    let mut s = grasp();
    s.noise_px = 0.0;
    s.convergence_eps_px = 1e-6;
    s.max_steps = 1000;
    s
}

/// Same scene watched by a different runtime rig: intrinsics and sensor
/// scaled by 1.3, both cameras moved.
pub fn relocated_runtime(mut s: Scenario) -> Scenario {
    let k = 1.3;
    s.image_width_px *= k;
    s.image_height_px *= k;
    let moves = [[-0.35, 0.25, 0.15], [0.55, 0.05, 0.3]];
    for (cam, pos) in s.runtime_rig.iter_mut().zip(moves) {
        let i = &mut cam.intrinsics;
        i.alpha_u_px *= k;
        i.alpha_v_px *= k;
        i.u0_px *= k;
        i.v0_px *= k;
        cam.position_m = pos;
    }
    s
}

/// Grasp scenario keeping only the first `n` object points.
pub fn with_object_points(mut s: Scenario, n: usize) -> Scenario {
    s.object_points_m.truncate(n);
    s
}

/// Per-coordinate RMS set-point error of one transfer run.
pub fn transfer_error(s: &Scenario) -> f64 {
    let scene = s.scene().expect("valid scene");
    plan_and_transfer(s, &scene).expect("transfer").rms_error_px
}

/// Largest coordinate difference between transferred and true set-points.
pub fn transfer_max_error(s: &Scenario) -> f64 {
    let scene = s.scene().expect("valid scene");
    let out = plan_and_transfer(s, &scene).expect("transfer");
    out.s_star
        .iter()
        .zip(&out.ground_truth)
        .map(|(a, b)| (a.coords() - b.coords()).amax())
        .fold(0.0, f64::max)
}

/// Transfer errors for seeds `0..seeds`.
pub fn transfer_errors(s: &Scenario, seeds: u64) -> Vec<f64> {
    (0..seeds)
        .map(|seed| {
            let mut s = s.clone();
            s.seed = seed;
            transfer_error(&s)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
