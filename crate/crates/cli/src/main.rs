use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use colony_track::calibration::{
    calibrate, local_minimum_fraction, registration_perturbations, CalibrationOptions, ConstraintMode,
    PerturbationMode, DEFAULT_BUDGET, DEFAULT_GAMMA,
};
use colony_track::io::{
    load_toml, parse_dynamics, read_frames, read_lineage_csv, to_toml, write_calibration_report, write_frames,
    write_json, write_lineage_csv, write_registration_csv, write_scatter_csv, write_trace_csv, ScheduleFile,
    WeightsFile,
};
use colony_track::pipeline::{ground_truth_reduction, track_sequence, PipelineConfig};
use colony_track::registration::{RegistrationProblem, RegistrationWeights};
use colony_track::simulator::{simulate, true_motion_bound, SimConfig};
use colony_track::{score, TrackError};

#[derive(Parser)]
#[command(name = "colony-track", version, about = "Registration and lineage tracking for dense rod-shaped cell colonies")]
struct Cli {
    /// Suppress console output; files are still written.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic colony sequence with exact lineage.
    Simulate {
        /// Simulator configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct divisions and registrations for a frame sequence.
    Track {
        #[arg(long)]
        frames: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        /// Lineage CSV to score the result against.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a lineage CSV against ground truth.
    Score {
        /// Inferred lineage CSV.
        predicted: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate registration weights from one ground-truth frame pair.
    Calibrate {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        /// Index of the first frame of the calibration pair.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Use every window alternative instead of one sample per cell.
        #[arg(long)]
        all_alternatives: bool,
        /// Literal equality constraints instead of the slack inequality.
        #[arg(long)]
        equality: bool,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Tuning {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight file with [registration], [division] and [trim] tables.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Schedule file.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, value_enum)]
    dynamics: Option<DynamicsArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DynamicsArg {
    Async,
    Sync,
    SwapAuto,
}

impl Tuning {
    fn pipeline_config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg: PipelineConfig = match &self.config {
            Some(p) => load_toml(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(p) = &self.weights {
            let w: WeightsFile = load_toml(p)?;
            if let Some(r) = w.registration {
                cfg.registration_weights = r;
            }
            if let Some(d) = w.division {
                cfg.division_weights = d;
            }
            if let Some(t) = w.trim {
                cfg.trim = t;
            }
        }
        if let Some(p) = &self.schedule {
            let s: ScheduleFile = load_toml(p)?;
            cfg.registration_schedule = s.registration.apply(&cfg.registration_schedule);
            if let Some(c) = &s.children {
                cfg.children_schedule = c.apply(&cfg.children_schedule);
            }
            if let Some(d) = s.dynamics()? {
                cfg.dynamics = d;
            }
        }
        if let Some(d) = self.dynamics {
            let name = match d {
                DynamicsArg::Async => "async",
                DynamicsArg::Sync => "sync",
                DynamicsArg::SwapAuto => "swap-auto",
            };
            cfg.dynamics = parse_dynamics(Some(name), None)?.expect("named dynamics");
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Console {
    quiet: bool,
}

impl Console {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct SimulationSummary {
    frames: usize,
    first_frame_cells: usize,
    last_frame_cells: usize,
    divisions: usize,
    truncated: bool,
    true_motion_bound: f64,
    config: SimConfig,
}

fn run_simulate(con: &Console, config: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let mut cfg: SimConfig = match config {
        Some(p) => load_toml(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sim = simulate(&cfg)?;
    ensure_dir(out)?;
    write_frames(&out.join("frames.jsonl"), &sim.frames)?;
    write_lineage_csv(&out.join("lineage.csv"), &sim.lineage)?;
    let summary = SimulationSummary {
        frames: sim.frames.len(),
        first_frame_cells: sim.frames.first().map_or(0, |f| f.len()),
        last_frame_cells: sim.frames.last().map_or(0, |f| f.len()),
        divisions: sim.events.len(),
        truncated: sim.truncated,
        true_motion_bound: true_motion_bound(&sim.frames, &sim.lineage)?,
        config: cfg,
    };
    write_json(&out.join("simulation.json"), &summary)?;
    con.say(format!(
        "{} frames, {} → {} cells, {} divisions{}",
        summary.frames,
        summary.first_frame_cells,
        summary.last_frame_cells,
        summary.divisions,
        if sim.truncated { " (truncated)" } else { "" }
    ));
    Ok(())
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    seed: u64,
    config: &'a PipelineConfig,
    pairs: &'a [colony_track::pipeline::PairDiagnostics],
}

fn run_track(con: &Console, frames: &Path, tuning: &Tuning, gt: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let cfg = tuning.pipeline_config()?;
    let frames = read_frames(frames)?;
    let tracking = track_sequence(&frames, &cfg)?;
    ensure_dir(out)?;
    write_lineage_csv(&out.join("lineage.csv"), &tracking.records)?;
    write_registration_csv(&out.join("registration.csv"), &tracking.records)?;
    write_json(&out.join("run.json"), &RunMetadata { seed: cfg.seed, config: &cfg, pairs: &tracking.diagnostics })?;
    let diag = out.join("diagnostics");
    ensure_dir(&diag)?;
    for d in &tracking.diagnostics {
        write_trace_csv(&diag.join(format!("registration_trace_{}.csv", d.frame_index)), &d.registration_trace)?;
        if d.div_count > 0 {
            write_trace_csv(&diag.join(format!("children_trace_{}.csv", d.frame_index)), &d.children_trace)?;
            write_scatter_csv(&diag.join(format!("scatter_{}.csv", d.frame_index)), &d.scatter)?;
        }
        if !d.padded.is_empty() {
            log::warn!("frame {}: {} empty target windows padded", d.frame_index, d.padded.len());
        }
    }
    let divisions: usize = tracking.records.iter().map(|r| r.division_count()).sum();
    con.say(format!("tracked {} interframes, {} divisions", tracking.records.len(), divisions));
    if let Some(gt) = gt {
        let truth = read_lineage_csv(gt)?;
        report_score(con, &tracking.records, &truth, out)?;
    }
    Ok(())
}

fn report_score(
    con: &Console,
    predicted: &[colony_track::LineageRecord],
    truth: &[colony_track::LineageRecord],
    out: &Path,
) -> anyhow::Result<()> {
    let report = score(predicted, truth)?;
    ensure_dir(out)?;
    write_json(&out.join("accuracy.json"), &report)?;
    con.say(format!(
        "registration accuracy mean {:.4} min {:.4}",
        report.mean_registration, report.min_registration
    ));
    if let (Some(m), Some(r)) = (report.mean_reduced, report.min_reduced) {
        con.say(format!("post-reduction accuracy mean {m:.4} min {r:.4}"));
    }
    match (report.mean_pcp, report.full_pcp_fraction) {
        (Some(m), Some(f)) => con.say(format!("pcp accuracy mean {m:.4}, {:.1}% of division frames perfect", 100.0 * f)),
        _ => con.say("no divisions in ground truth"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_calibrate(
    con: &Console,
    frames: &Path,
    gt: &Path,
    tuning: &Tuning,
    pair: usize,
    all: bool,
    equality: bool,
    gamma: f64,
    budget: f64,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = tuning.pipeline_config()?;
    let frames = read_frames(frames)?;
    let truth = read_lineage_csv(gt)?;
    let (Some(a), Some(b)) = (frames.iter().find(|f| f.index == pair), frames.iter().find(|f| f.index == pair + 1)) else {
        bail!(TrackError::InvalidConfig(format!("frames {pair} and {} are not both present", pair + 1)));
    };
    let record = truth
        .iter()
        .find(|r| r.frame_index == pair)
        .ok_or_else(|| TrackError::Mismatch(format!("no ground truth for frame {pair}")))?;
    let (reduction, f) = ground_truth_reduction(a, b, record)?;
    let mut problem = RegistrationProblem::build(
        &reduction.source,
        &reduction.target,
        cfg.w,
        cfg.rho,
        cfg.registration_weights,
        cfg.growth,
    )?;
    let mode = if all { PerturbationMode::All } else { PerturbationMode::Sample };
    let mut instance = registration_perturbations(&problem, &f, mode, cfg.seed)?;
    instance.gamma = gamma;
    instance.budget = budget;
    instance.mode = if equality { ConstraintMode::Equality } else { ConstraintMode::Inequality };
    let cal = calibrate(&instance, &CalibrationOptions { seed: cfg.seed, ..Default::default() })?;
    let weights = RegistrationWeights::from_array([cal.lambda[0], cal.lambda[1], cal.lambda[2], cal.lambda[3]]);
    problem.weights = weights;
    let local = local_minimum_fraction(&problem, &f);

    ensure_dir(out)?;
    let file = WeightsFile { registration: Some(weights), division: None, trim: None };
    fs::write(out.join("weights.toml"), to_toml(&file)?)?;
    write_calibration_report(&out.join("calibration_report.csv"), &cal.report(&instance))?;
    write_json(&out.join("calibration.json"), &cal)?;
    con.say(format!(
        "weights match={:.4} over={:.4} stab={:.4} flip={:.4}",
        weights.match_, weights.over, weights.stab, weights.flip
    ));
    con.say(format!(
        "{} perturbations, objective {:.6e}, ground truth locally minimal for {:.2}% of cells",
        instance.vectors.len(),
        cal.objective,
        100.0 * local
    ));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<TrackError>() {
        Some(TrackError::Infeasible(_)) => 3,
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "warn" }))
        .init();
    let con = Console { quiet: cli.quiet };
    let result = match &cli.command {
        Command::Simulate { config, seed, out } => run_simulate(&con, config.as_deref(), *seed, out),
        Command::Track { frames, tuning, ground_truth, out } => run_track(&con, frames, tuning, ground_truth.as_deref(), out),
        Command::Score { predicted, ground_truth, out } => (|| {
            let p = read_lineage_csv(predicted)?;
            let t = read_lineage_csv(ground_truth)?;
            let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
            report_score(&con, &p, &t, &dir)
        })(),
        Command::Calibrate { frames, ground_truth, tuning, pair, all_alternatives, equality, gamma, budget, out } => {
            run_calibrate(&con, frames, ground_truth, tuning, *pair, *all_alternatives, *equality, *gamma, *budget, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
