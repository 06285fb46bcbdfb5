//! Summary records written as `summary.json` and printed as tables.

use serde::Serialize;

use vgrasp_core::servo_sim::{GraspResult, JacobianMode, Scenario, ServoTrace};

/// Set-point accuracy the transfer stage is designed for (px).
pub const SETPOINT_TARGET_PX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Stats {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            p90: v[((0.9 * n as f64).ceil() as usize).clamp(1, n) - 1],
            min: v[0],
            max: v[n - 1],
        })
    }
}

fn median_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    Stats::of(&values.collect::<Vec<_>>()).map(|s| s.median)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub converged: bool,
    pub steps: usize,
    pub final_error_px: f64,
    pub final_alignment_error_3d_m: f64,
    pub log_fit_slope: Option<f64>,
    pub log_fit_r_squared: Option<f64>,
    pub time_to_half_error_s: Option<f64>,
}

impl RunRecord {
    pub fn new(seed: u64, trace: &ServoTrace, result: &GraspResult) -> Self {
        let fit = trace.log_error_fit();
        RunRecord {
            seed,
            converged: result.converged,
            steps: result.steps,
            final_error_px: result.final_error_px,
            final_alignment_error_3d_m: result.final_alignment_error_3d,
            log_fit_slope: fit.map(|f| f.slope),
            log_fit_r_squared: fit.map(|f| f.r_squared),
            time_to_half_error_s: trace.time_to_half_error(),
        }
    }

    pub fn steps_to_converge(&self) -> Option<usize> {
        self.converged.then_some(self.steps)
    }
}

fn mode_name(mode: JacobianMode) -> &'static str {
    match mode {
        JacobianMode::Constant => "constant",
        JacobianMode::Variable => "variable",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub jacobian_mode: &'static str,
    pub cameras_used: usize,
    pub noise_px: f64,
    pub gain_per_s: f64,
    pub convergence_rate: f64,
    pub log_fit_slope: Option<Stats>,
    pub log_fit_r_squared: Option<Stats>,
    pub final_error_px: Option<Stats>,
    pub final_alignment_error_3d_m: Option<Stats>,
    pub runs: Vec<RunRecord>,
}

impl RunSummary {
    pub fn new(scenario: &Scenario, runs: Vec<RunRecord>) -> Self {
        let collect = |f: fn(&RunRecord) -> Option<f64>| Stats::of(&runs.iter().filter_map(f).collect::<Vec<_>>());
        RunSummary {
            scenario: scenario.name.clone(),
            jacobian_mode: mode_name(scenario.jacobian_mode),
            cameras_used: scenario.cameras_used,
            noise_px: scenario.noise_px,
            gain_per_s: scenario.gain_per_s,
            convergence_rate: runs.iter().filter(|r| r.converged).count() as f64 / runs.len().max(1) as f64,
            log_fit_slope: collect(|r| r.log_fit_slope),
            log_fit_r_squared: collect(|r| r.log_fit_r_squared),
            final_error_px: collect(|r| Some(r.final_error_px)),
            final_alignment_error_3d_m: collect(|r| Some(r.final_alignment_error_3d_m)),
            runs,
        }
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{} ({} jacobian, {} camera(s), {} px noise): {}/{} converged\n",
            self.scenario,
            self.jacobian_mode,
            self.cameras_used,
            self.noise_px,
            self.runs.iter().filter(|r| r.converged).count(),
            self.runs.len()
        );
        out.push_str(&format!(
            "{:>6} {:>6} {:>12} {:>10} {:>9} {:>14}\n",
            "seed", "steps", "final px", "slope", "R²", "align mm"
        ));
        for r in &self.runs {
            out.push_str(&format!(
                "{:>6} {:>6} {:>12.3e} {:>10} {:>9} {:>14.4}\n",
                r.seed,
                r.steps,
                r.final_error_px,
                fmt_opt(r.log_fit_slope, 4),
                fmt_opt(r.log_fit_r_squared, 5),
                1e3 * r.final_alignment_error_3d_m
            ));
        }
        out
    }
}

/// One mode's runs over the compared seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeColumn {
    pub mode: &'static str,
    pub median_time_to_half_error_s: Option<f64>,
    pub median_steps_to_converge: Option<f64>,
    pub median_r_squared: Option<f64>,
    pub convergence_rate: f64,
    #[serde(skip)]
    pub runs: Vec<RunRecord>,
}

impl ModeColumn {
    pub fn new(mode: &'static str, runs: Vec<RunRecord>) -> Self {
        ModeColumn {
            mode,
            median_time_to_half_error_s: median_of(runs.iter().filter_map(|r| r.time_to_half_error_s)),
            median_steps_to_converge: median_of(runs.iter().filter_map(|r| r.steps_to_converge().map(|s| s as f64))),
            median_r_squared: median_of(runs.iter().filter_map(|r| r.log_fit_r_squared)),
            convergence_rate: runs.iter().filter(|r| r.converged).count() as f64 / runs.len().max(1) as f64,
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareEntry {
    pub time_to_half_error_s: Option<f64>,
    pub steps_to_converge: Option<usize>,
    pub r_squared: Option<f64>,
}

impl From<&RunRecord> for CompareEntry {
    fn from(r: &RunRecord) -> Self {
        CompareEntry {
            time_to_half_error_s: r.time_to_half_error_s,
            steps_to_converge: r.steps_to_converge(),
            r_squared: r.log_fit_r_squared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub a: CompareEntry,
    pub b: CompareEntry,
}

impl CompareRow {
    pub fn new(seed: u64, a: &RunRecord, b: &RunRecord) -> Self {
        CompareRow {
            seed,
            a: a.into(),
            b: b.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub scenario: String,
    pub a: ModeColumn,
    pub b: ModeColumn,
    pub rows: Vec<CompareRow>,
}

impl CompareSummary {
    pub fn new(scenario: &str, rows: Vec<CompareRow>, columns: Vec<ModeColumn>) -> Self {
        let [a, b]: [ModeColumn; 2] = columns.try_into().expect("two modes");
        CompareSummary {
            scenario: scenario.to_string(),
            a,
            b,
            rows,
        }
    }

    pub fn table(&self) -> String {
        let cell = |e: &CompareEntry| {
            format!(
                "{:>8} {:>6} {:>8}",
                fmt_opt(e.time_to_half_error_s, 2),
                e.steps_to_converge.map_or_else(|| "-".into(), |s| s.to_string()),
                fmt_opt(e.r_squared, 4)
            )
        };
        let head = format!("{:>8} {:>6} {:>8}", "t½ s", "steps", "R²");
        let mut out = format!("{}: a = {}, b = {}\n", self.scenario, self.a.mode, self.b.mode);
        out.push_str(&format!("{:>6} | {head} | {head}\n", "seed"));
        for r in &self.rows {
            out.push_str(&format!("{:>6} | {} | {}\n", r.seed, cell(&r.a), cell(&r.b)));
        }
        let median = |c: &ModeColumn| {
            format!(
                "{:>8} {:>6} {:>8}",
                fmt_opt(c.median_time_to_half_error_s, 2),
                fmt_opt(c.median_steps_to_converge, 1),
                fmt_opt(c.median_r_squared, 4)
            )
        };
        out.push_str(&format!(
            "{:>6} | {} | {}\n",
            "median",
            median(&self.a),
            median(&self.b)
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferCell {
    pub points: usize,
    pub noise_px: f64,
    /// Per-coordinate RMS set-point error over seeds (px).
    pub rms_error_px: Stats,
}

impl TransferCell {
    pub fn new(points: usize, noise_px: f64, errors: &[f64]) -> Self {
        TransferCell {
            points,
            noise_px,
            rms_error_px: Stats::of(errors).expect("at least one seed"),
        }
    }
}

/// Comparison of one cell at the design noise level against the target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetCheck {
    pub points: usize,
    pub median_rms_error_px: f64,
    pub target_px: f64,
    pub within_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferSummary {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<TransferCell>,
    /// Cells with 15 to 20 points at 0.5 px noise.
    pub target_check: Vec<TargetCheck>,
}

impl TransferSummary {
    pub fn new(scenario: &str, seeds: Vec<u64>, cells: Vec<TransferCell>) -> Self {
        let target_check = cells
            .iter()
            .filter(|c| (15..=20).contains(&c.points) && c.noise_px == 0.5)
            .map(|c| TargetCheck {
                points: c.points,
                median_rms_error_px: c.rms_error_px.median,
                target_px: SETPOINT_TARGET_PX,
                within_target: c.rms_error_px.median <= SETPOINT_TARGET_PX,
            })
            .collect();
        TransferSummary {
            scenario: scenario.to_string(),
            seeds,
            cells,
            target_check,
        }
    }

    /// Median error per cell, one row per point count.
    pub fn table(&self, noise_levels: &[f64]) -> String {
        let mut out = format!(
            "median RMS set-point error (px) over {} seeds\n{:>6}",
            self.seeds.len(),
            "points"
        );
        for n in noise_levels {
            out.push_str(&format!(" {:>10}", format!("{n} px")));
        }
        out.push('\n');
        for row in self.cells.chunks(noise_levels.len()) {
            out.push_str(&format!("{:>6}", row[0].points));
            for c in row {
                out.push_str(&format!(" {:>10.4}", c.rms_error_px.median));
            }
            out.push('\n');
        }
        for t in &self.target_check {
            out.push_str(&format!(
                "{} points at 0.5 px: median {:.3} px vs {} px target ({})\n",
                t.points,
                t.median_rms_error_px,
                t.target_px,
                if t.within_target { "within" } else { "above" }
            ));
        }
        out
    }
}
