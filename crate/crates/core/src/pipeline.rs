//! Sequence tracking: divisions first, then one-to-one registration of the
//! remaining cells, for every consecutive frame pair. Also scores inferred
//! records against ground truth.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealer::{Dynamics, Schedule, TraceRow};
use crate::division::{
    build_children_bm, build_pch, lineages_from_selection, reduce_frames, scatter_rows, solve_children,
    trim_candidates, DivisionWeights, Reduction, ScatterRow, ShortLineage, TrimThresholds, DEFAULT_TAU,
};
use crate::error::{Result, TrackError};
use crate::geometry::{CellId, Frame, DEFAULT_RHO};
use crate::lineage::{LineageEntry, LineageRecord};
use crate::registration::{register, RegistrationProblem, RegistrationWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Target-window side, px.
    pub w: f64,
    pub rho: f64,
    pub tau: f64,
    /// Expected length ratio over one interframe.
    pub growth: f64,
    pub registration_weights: RegistrationWeights,
    pub division_weights: DivisionWeights,
    pub trim: TrimThresholds,
    pub registration_schedule: Schedule,
    pub children_schedule: Schedule,
    /// Registration dynamics; children pairing always uses swap dynamics.
    pub dynamics: Dynamics,
    pub seed: u64,
    /// Accept one division fewer when only `DIV − 1` disjoint pairs exist.
    pub relax: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            w: 45.0,
            rho: DEFAULT_RHO,
            tau: DEFAULT_TAU,
            growth: 1.05,
            registration_weights: RegistrationWeights::default(),
            division_weights: DivisionWeights::default(),
            trim: TrimThresholds::default(),
            registration_schedule: Schedule::registration(),
            children_schedule: Schedule::children(),
            dynamics: Dynamics::Async,
            seed: 0,
            relax: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w", self.w), ("rho", self.rho), ("tau", self.tau), ("growth", self.growth)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrackError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if let Dynamics::Sync { alpha } = self.dynamics {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(TrackError::InvalidConfig("alpha must lie in (0, 1]".into()));
            }
        }
        if matches!(self.dynamics, Dynamics::Swap) {
            return Err(TrackError::InvalidConfig("registration needs async or sync dynamics".into()));
        }
        self.registration_weights.validate()?;
        self.division_weights.validate()?;
        self.registration_schedule.validate()?;
        self.children_schedule.validate()?;
        Ok(())
    }

    fn pair_seed(&self, frame_index: usize) -> u64 {
        self.seed ^ (frame_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Per-interframe diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub frame_index: usize,
    pub cells: usize,
    pub next_cells: usize,
    pub div_count: usize,
    pub candidates: usize,
    pub trimmed_candidates: usize,
    pub max_disjoint: usize,
    /// Divisions actually reconstructed (one fewer under relaxation).
    pub divisions_found: usize,
    pub children_energy: Option<f64>,
    pub registration_initial_energy: f64,
    pub registration_energy: f64,
    pub registration_epochs: usize,
    /// `[unary, pair, triple]` clique counts of the registration problem.
    pub clique_counts: [usize; 3],
    /// Sources whose empty window was padded with the nearest target.
    pub padded: Vec<CellId>,
    #[serde(skip)]
    pub registration_trace: Vec<TraceRow>,
    #[serde(skip)]
    pub children_trace: Vec<TraceRow>,
    #[serde(skip)]
    pub scatter: Vec<ScatterRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracking {
    pub records: Vec<LineageRecord>,
    pub diagnostics: Vec<PairDiagnostics>,
}

/// Division detection and registration of one frame pair.
pub fn track_pair(frame: &Frame, next: &Frame, config: &PipelineConfig) -> Result<(LineageRecord, PairDiagnostics)> {
    let k = frame.index;
    if next.len() < frame.len() {
        return Err(TrackError::CellLoss { frame: k, current: frame.len(), next: next.len() });
    }
    let seed = config.pair_seed(k);
    let div = next.len() - frame.len();
    let mut diag = PairDiagnostics { frame_index: k, cells: frame.len(), next_cells: next.len(), div_count: div, ..Default::default() };

    let mut lineages = Vec::new();
    if div > 0 {
        let all = build_pch(frame, next, config.tau, config.w, &config.division_weights);
        diag.candidates = all.len();
        let feasible: Vec<_> = all.into_iter().filter(|c| c.is_feasible()).collect();
        let kept = trim_candidates(feasible, &config.trim);
        diag.trimmed_candidates = kept.len();
        diag.scatter = scatter_rows(&kept, None);
        if kept.is_empty() {
            return Err(TrackError::Infeasible(format!("frame {k}: {div} divisions but no plausible children pair")));
        }
        let problem = build_children_bm(kept, div, &config.division_weights)?;
        diag.max_disjoint = problem.max_disjoint;
        let solution = solve_children(&problem, &config.children_schedule, seed, config.relax)
            .map_err(|e| match e {
                TrackError::Infeasible(m) => TrackError::Infeasible(format!("frame {k}: {m}")),
                other => other,
            })?;
        if solution.selected.len() < div {
            log::warn!("frame {k}: relaxed to {} of {div} divisions", solution.selected.len());
        }
        diag.divisions_found = solution.selected.len();
        diag.children_energy = Some(solution.energy);
        diag.children_trace = solution.trace;
        lineages = lineages_from_selection(&problem, &solution.selected);
    }

    let reduction = reduce_frames(frame, next, &lineages)?;
    let mut entries = reduction.divided.clone();
    if !reduction.source.is_empty() {
        let problem = RegistrationProblem::build(
            &reduction.source,
            &reduction.target,
            config.w,
            config.rho,
            config.registration_weights,
            config.growth,
        )?;
        diag.clique_counts = problem.bm.clique_counts_by_arity();
        diag.padded = problem.padded.iter().map(|&i| reduction.source.cells[i].id.clone()).collect();
        let result = register(&problem, config.dynamics, &config.registration_schedule, seed)?;
        diag.registration_initial_energy = result.initial_energy;
        diag.registration_energy = result.energy;
        diag.registration_epochs = result.epochs;
        diag.registration_trace = result.trace;
        for (b, &t) in reduction.source.cells.iter().zip(&result.assignment) {
            entries.push(LineageEntry::Moved { source: b.id.clone(), target: reduction.target.cells[t].id.clone() });
        }
    }
    let record = LineageRecord::new(k, entries).normalized();
    Ok((record, diag))
}

/// Tracks every consecutive pair of `frames`; pairs run in parallel.
pub fn track_sequence(frames: &[Frame], config: &PipelineConfig) -> Result<Tracking> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(TrackError::InvalidConfig("tracking needs at least two frames".into()));
    }
    for f in frames {
        f.validate()?;
    }
    let results: Vec<(LineageRecord, PairDiagnostics)> = frames
        .par_windows(2)
        .map(|pair| track_pair(&pair[0], &pair[1], config))
        .collect::<Result<_>>()?;
    let (records, diagnostics) = results.into_iter().unzip();
    Ok(Tracking { records, diagnostics })
}

/// Reduction of a frame pair by its true division triplets, with the true
/// registration of the remaining cells as indices into the reduced target.
pub fn ground_truth_reduction(frame: &Frame, next: &Frame, record: &LineageRecord) -> Result<(Reduction, Vec<usize>)> {
    record.validate(frame, next)?;
    let pos = |f: &Frame, id: &CellId| f.position(id).ok_or_else(|| TrackError::Mismatch(format!("unknown id {id}")));
    let mut lineages = Vec::new();
    for e in record.divisions() {
        if let LineageEntry::Divided { source, children } = e {
            lineages.push(ShortLineage {
                parent: pos(frame, source)?,
                children: (pos(next, &children.0)?, pos(next, &children.1)?),
                distortion: 0.0,
            });
        }
    }
    let reduction = reduce_frames(frame, next, &lineages)?;
    let by_source = record.by_source();
    let f = reduction
        .source
        .cells
        .iter()
        .map(|c| match by_source.get(&c.id) {
            Some(LineageEntry::Moved { target, .. }) => pos(&reduction.target, target),
            _ => Err(TrackError::Mismatch(format!("no move for {}", c.id))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((reduction, f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAccuracy {
    pub frame_index: usize,
    pub div_count: usize,
    /// `VAL/DIV`; absent when the interframe has no division.
    pub pcp_accuracy: Option<f64>,
    /// Sources whose whole entry (move target or children pair) is right.
    pub registration_accuracy: f64,
    /// Among sources the tracker moved, those moved to the true target.
    pub reduced_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub frames: Vec<FrameAccuracy>,
    pub mean_pcp: Option<f64>,
    pub min_pcp: Option<f64>,
    /// Share of frames with divisions whose pcp-accuracy is exactly 1.
    pub full_pcp_fraction: Option<f64>,
    pub mean_registration: f64,
    pub min_registration: f64,
    pub mean_reduced: Option<f64>,
    pub min_reduced: Option<f64>,
    /// Ten equal buckets of per-frame registration accuracy over [0, 1].
    pub histogram: Vec<HistogramBucket>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn min(v: &[f64]) -> Option<f64> {
    v.iter().copied().reduce(f64::min)
}

/// Compares inferred records with ground truth, frame by frame. Both must
/// refer to the same cell ids.
pub fn score(records: &[LineageRecord], truth: &[LineageRecord]) -> Result<AccuracyReport> {
    if records.len() != truth.len() {
        return Err(TrackError::Mismatch(format!("{} records against {} ground-truth records", records.len(), truth.len())));
    }
    let mut frames = Vec::with_capacity(truth.len());
    for (rec, gt) in records.iter().zip(truth) {
        if rec.frame_index != gt.frame_index {
            return Err(TrackError::Mismatch(format!("frame {} scored against frame {}", rec.frame_index, gt.frame_index)));
        }
        let predicted: HashMap<&CellId, LineageEntry> = rec.entries.iter().map(|e| (e.source(), e.canonical())).collect();
        let true_divs: Vec<LineageEntry> = gt.divisions().map(LineageEntry::canonical).collect();
        let pred_divs: HashSet<LineageEntry> = rec.divisions().map(LineageEntry::canonical).collect();
        let div_count = true_divs.len();
        let pcp = (div_count > 0).then(|| true_divs.iter().filter(|d| pred_divs.contains(d)).count() as f64 / div_count as f64);

        let mut correct = 0usize;
        let mut moved = 0usize;
        let mut moved_correct = 0usize;
        for entry in &gt.entries {
            let truth_entry = entry.canonical();
            let guess = predicted.get(entry.source());
            if guess == Some(&truth_entry) {
                correct += 1;
            }
            if let Some(LineageEntry::Moved { .. }) = guess {
                moved += 1;
                if guess == Some(&truth_entry) {
                    moved_correct += 1;
                }
            }
        }
        let n = gt.entries.len();
        frames.push(FrameAccuracy {
            frame_index: gt.frame_index,
            div_count,
            pcp_accuracy: pcp,
            registration_accuracy: if n == 0 { 1.0 } else { correct as f64 / n as f64 },
            reduced_accuracy: (moved > 0).then(|| moved_correct as f64 / moved as f64),
        });
    }
    let pcp: Vec<f64> = frames.iter().filter_map(|f| f.pcp_accuracy).collect();
    let reg: Vec<f64> = frames.iter().map(|f| f.registration_accuracy).collect();
    let red: Vec<f64> = frames.iter().filter_map(|f| f.reduced_accuracy).collect();
    let mut histogram: Vec<HistogramBucket> =
        (0..10).map(|b| HistogramBucket { lo: b as f64 / 10.0, hi: (b + 1) as f64 / 10.0, count: 0 }).collect();
    for &r in &reg {
        histogram[((r * 10.0).floor() as usize).min(9)].count += 1;
    }
    Ok(AccuracyReport {
        mean_pcp: mean(&pcp),
        min_pcp: min(&pcp),
        full_pcp_fraction: (!pcp.is_empty()).then(|| pcp.iter().filter(|&&p| p == 1.0).count() as f64 / pcp.len() as f64),
        mean_registration: mean(&reg).unwrap_or(1.0),
        min_registration: min(&reg).unwrap_or(1.0),
        mean_reduced: mean(&red),
        min_reduced: min(&red),
        histogram,
        frames,
    })
}
