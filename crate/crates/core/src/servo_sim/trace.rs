//! Per-step servo records, CSV export and log-error statistics.

use std::io::{self, Write};

use crate::control::ImageJacobian;
use crate::geometry::{RigidTransform, ScrewTransform, VelocityScrew};

pub const CSV_HEADER: &str = "step,time_s,error_px,vx,vy,vz,wx,wy,wz,pose_rms_px,ms_pose,ms_jacobian,ms_control";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub time_s: f64,
    /// `‖s* − s‖` over every row of the servo system (px).
    pub error_px: f64,
    /// Commanded screw; zero on the terminal row.
    pub screw: VelocityScrew,
    /// Screw actually executed (differs only under actuator noise).
    pub applied_screw: VelocityScrew,
    /// Gripper displacement relative to its initial frame at this step.
    pub displacement: RigidTransform,
    /// Mean reprojection RMS of this step's pose estimates, when any ran.
    pub pose_rms_px: Option<f64>,
    pub ms_pose: f64,
    pub ms_jacobian: f64,
    pub ms_control: f64,
    /// Screw transforms used to build this step's Jacobian, one per camera.
    pub thetas: Vec<ScrewTransform>,
    pub jacobian: Option<ImageJacobian>,
}

impl TraceRow {
    /// Same row with the wall-clock fields zeroed.
    pub fn without_timing(&self) -> TraceRow {
        TraceRow {
            ms_pose: 0.0,
            ms_jacobian: 0.0,
            ms_control: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServoTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogErrorFit {
    /// d ln‖e‖ / dt (1/s).
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl ServoTrace {
    pub fn steps(&self) -> usize {
        self.rows.last().map_or(0, |r| r.step)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            let s = r.screw;
            let rms = r.pose_rms_px.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.time_s,
                r.error_px,
                s.linear.x,
                s.linear.y,
                s.linear.z,
                s.angular.x,
                s.angular.y,
                s.angular.z,
                rms,
                r.ms_pose,
                r.ms_jacobian,
                r.ms_control
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// Least-squares line through `(t, ln error)` over rows with nonzero error.
    pub fn log_error_fit(&self) -> Option<LogErrorFit> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.error_px > 0.0)
            .map(|r| (r.time_s, r.error_px.ln()))
            .collect();
        linear_fit(&pts)
    }

    /// First time the error reaches half its initial value, interpolated
    /// linearly between rows.
    pub fn time_to_half_error(&self) -> Option<f64> {
        let first = self.rows.first()?;
        let half = 0.5 * first.error_px;
        self.rows.windows(2).find(|w| w[1].error_px <= half).map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let frac = (a.error_px - half) / (a.error_px - b.error_px);
            a.time_s + frac * (b.time_s - a.time_s)
        })
    }
}

pub fn linear_fit(pts: &[(f64, f64)]) -> Option<LogErrorFit> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some(LogErrorFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
