//! `vgrasp`: run servo scenarios, compare Jacobian modes and evaluate
//! set-point transfer accuracy.
//!
//! ```text
//! vgrasp run --scenario small_displacement --out runs/small --seeds 1..20
//! vgrasp compare --scenario large_displacement --out runs/cmp
//! vgrasp transfer-eval --scenario transfer_sweep --out runs/transfer --seeds 1..50
//! ```

mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use vgrasp_core::servo_sim::{plan_and_transfer, run_servo, GraspResult, JacobianMode, Scenario, ServoTrace, BUNDLED};

use report::{CompareRow, CompareSummary, ModeColumn, RunRecord, RunSummary, TransferCell, TransferSummary};

#[derive(Parser, Debug)]
#[command(name = "vgrasp", version, about = "Visual servoing and grasp transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Servo every seed and write traces plus a summary.
    Run(CommonArgs),
    /// Run two Jacobian modes on the same seeds side by side.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// The two modes to compare, comma separated.
        #[arg(long, value_delimiter = ',', default_values = ["variable", "constant"])]
        modes: Vec<Mode>,
    },
    /// Sweep object-point count and pixel noise, reporting set-point error.
    TransferEval {
        #[command(flatten)]
        common: CommonArgs,
        /// Object-point counts, inclusive range.
        #[arg(long, default_value = "5..25", value_parser = parse_range)]
        points: (u64, u64),
        /// Pixel noise levels.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        noise_levels: Vec<f64>,
    },
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    scenario: String,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Inclusive seed range `a..b` or a single seed; defaults to the scenario's seed.
    #[arg(long, value_parser = parse_range)]
    seeds: Option<(u64, u64)>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=2))]
    cameras: Option<u64>,
    #[arg(long)]
    noise_px: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Constant,
    Variable,
}

impl Mode {
    fn jacobian(self) -> JacobianMode {
        match self {
            Mode::Constant => JacobianMode::Constant,
            Mode::Variable => JacobianMode::Variable,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Mode::Constant => "constant",
            Mode::Variable => "variable",
        }
    }
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let parse = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("`{t}`: {e}"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (parse(a)?, parse(b.strip_prefix('=').unwrap_or(b))?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if a > b {
        return Err(format!("empty range {s}"));
    }
    Ok((a, b))
}

/// Loads a scenario from a file, falling back to the bundled set for bare names.
fn load_scenario(spec: &str) -> Result<Scenario> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(s) = Scenario::bundled(spec) {
            return Ok(s);
        }
        bail!(
            "cannot read scenario file {}: no such file (bundled scenarios: {})",
            path.display(),
            BUNDLED.join(", ")
        );
    }
    let text = fs::read_to_string(path).with_context(|| format!("cannot read scenario file {}", path.display()))?;
    Scenario::from_json_str(&text).with_context(|| format!("{}", path.display()))
}

/// Scenario with command-line overrides applied and validated.
fn effective_scenario(args: &CommonArgs) -> Result<Scenario> {
    let mut s = load_scenario(&args.scenario)?;
    if let Some(mode) = args.mode {
        s.jacobian_mode = mode.jacobian();
    }
    if let Some(c) = args.cameras {
        s.cameras_used = c as usize;
    }
    if let Some(n) = args.noise_px {
        s.noise_px = n;
    }
    s.validate()
        .with_context(|| format!("{} after overrides", args.scenario))?;
    Ok(s)
}

fn seeds(args: &CommonArgs, scenario: &Scenario) -> Vec<u64> {
    let (a, b) = args.seeds.unwrap_or((scenario.seed, scenario.seed));
    (a..=b).collect()
}

fn prepare_out(args: &CommonArgs, scenario: &Scenario) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create output directory {}", args.out.display()))?;
    write(&args.out.join("effective_scenario.json"), &scenario.to_json_string())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn servo_seed(scenario: &Scenario, seed: u64) -> Result<(ServoTrace, GraspResult)> {
    let mut s = scenario.clone();
    s.seed = seed;
    run_servo(&s).with_context(|| format!("seed {seed}"))
}

/// Servo all seeds in parallel, writing one trace per seed into `dir`.
fn servo_seeds(scenario: &Scenario, seeds: &[u64], dir: &Path) -> Result<Vec<RunRecord>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    seeds
        .par_iter()
        .map(|&seed| {
            let (trace, result) = servo_seed(scenario, seed)?;
            write(&dir.join(format!("trace_seed_{seed}.csv")), &trace.to_csv_string())?;
            Ok(RunRecord::new(seed, &trace, &result))
        })
        .collect()
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let scenario = effective_scenario(args)?;
    prepare_out(args, &scenario)?;
    let seeds = seeds(args, &scenario);
    let runs = servo_seeds(&scenario, &seeds, &args.out)?;
    let summary = RunSummary::new(&scenario, runs);
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{}", summary.table());
    Ok(())
}

fn cmd_compare(args: &CommonArgs, modes: &[Mode]) -> Result<()> {
    if modes.len() != 2 {
        bail!("--modes takes exactly two modes, got {}", modes.len());
    }
    let scenario = effective_scenario(args)?;
    prepare_out(args, &scenario)?;
    let seeds = seeds(args, &scenario);
    let mut columns = Vec::new();
    for (slot, mode) in ["a", "b"].iter().zip(modes) {
        let mut s = scenario.clone();
        s.jacobian_mode = mode.jacobian();
        let dir = args.out.join(format!("{slot}_{}", mode.name()));
        columns.push(ModeColumn::new(mode.name(), servo_seeds(&s, &seeds, &dir)?));
    }
    let rows = seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| CompareRow::new(seed, &columns[0].runs[i], &columns[1].runs[i]))
        .collect();
    let summary = CompareSummary::new(&scenario.name, rows, columns);
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{}", summary.table());
    Ok(())
}

fn cmd_transfer_eval(args: &CommonArgs, points: (u64, u64), noise_levels: &[f64]) -> Result<()> {
    let scenario = effective_scenario(args)?;
    let available = scenario.object_points_m.len() as u64;
    if points.0 < 5 || points.1 > available {
        bail!(
            "point counts {}..{} outside 5..{available} available in {}",
            points.0,
            points.1,
            args.scenario
        );
    }
    if let Some(bad) = noise_levels.iter().find(|n| !(n.is_finite() && **n >= 0.0)) {
        bail!("noise level {bad} must be finite and nonnegative");
    }
    prepare_out(args, &scenario)?;
    let seeds = seeds(args, &scenario);
    let mut grid: Vec<(usize, f64, u64)> = Vec::new();
    for n in points.0..=points.1 {
        for &noise in noise_levels {
            grid.extend(seeds.iter().map(|&seed| (n as usize, noise, seed)));
        }
    }
    let errors: Vec<f64> = grid
        .par_iter()
        .map(|&(n, noise, seed)| {
            let mut s = scenario.clone();
            s.object_points_m.truncate(n);
            s.noise_px = noise;
            s.seed = seed;
            let scene = s.scene()?;
            let outcome =
                plan_and_transfer(&s, &scene).with_context(|| format!("{n} points, {noise} px, seed {seed}"))?;
            Ok(outcome.rms_error_px)
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("points,noise_px,seed,rms_error_px\n");
    for ((n, noise, seed), e) in grid.iter().zip(&errors) {
        csv.push_str(&format!("{n},{noise},{seed},{e}\n"));
    }
    write(&args.out.join("transfer_errors.csv"), &csv)?;

    let per_cell = seeds.len();
    let cells = grid
        .chunks(per_cell)
        .zip(errors.chunks(per_cell))
        .map(|(g, e)| TransferCell::new(g[0].0, g[0].1, e))
        .collect();
    let summary = TransferSummary::new(&scenario.name, seeds, cells);
    write_json(&args.out.join("summary.json"), &summary)?;
    println!("{}", summary.table(noise_levels));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare { common, modes } => cmd_compare(&common, &modes),
        Command::TransferEval {
            common,
            points,
            noise_levels,
        } => cmd_transfer_eval(&common, points, &noise_levels),
    }
}
