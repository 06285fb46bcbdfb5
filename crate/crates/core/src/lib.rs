//! Uncalibrated visual servoing for grasping: rigid geometry, pin-hole
//! cameras, image-based control, model-based pose estimation, projective
//! grasp transfer and a deterministic closed-loop simulator.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod control;
pub mod geometry;
pub mod noise;
pub mod pose;
pub mod projective;
pub mod servo_sim;
