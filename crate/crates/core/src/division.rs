//! Division detection between two frames.
//!
//! With `DIV = N₊ − N > 0` divisions, plausible children pairs are cells of
//! the next frame closer than `τ`. Each pair is scored by five penalties
//! (lineage distortion against its best parent, tip gap, misalignment, length
//! ratio and length rank) and a binary Boltzmann machine selects exactly `DIV`
//! non-overlapping pairs. The selected triplets are then removed from both
//! frames, leaving a one-to-one registration problem.

use std::collections::HashSet;

use petgraph::algo::maximum_matching;
use petgraph::graph::UnGraph;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealer::{anneal, CliqueProblem, CliqueTable, Dynamics, Schedule, TraceRow};
use crate::error::{Result, TrackError};
use crate::geometry::{line_angle, Cell, Frame, Vec2};
use crate::lineage::LineageEntry;

/// Default children-pair distance threshold in pixels.
pub const DEFAULT_TAU: f64 = 45.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivisionWeights {
    pub cen: f64,
    pub siz: f64,
    pub ang: f64,
    pub lin: f64,
    pub gap: f64,
    pub dev: f64,
    pub rat: f64,
    pub rank: f64,
    /// Overlap weight; `None` uses ten times the largest pair energy.
    pub lambda_q: Option<f64>,
    /// Also penalize two selected pairs that share an estimated parent.
    pub parent_conflicts: bool,
}

impl Default for DivisionWeights {
    fn default() -> Self {
        DivisionWeights {
            cen: 0.255,
            siz: 0.05,
            ang: 0.05,
            lin: 1.0,
            gap: 0.01,
            dev: 1.0,
            rat: 0.0001,
            rank: 0.05,
            lambda_q: None,
            parent_conflicts: true,
        }
    }
}

impl DivisionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cen, self.siz, self.ang, self.lin, self.gap, self.dev, self.rat, self.rank];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrackError::InvalidConfig("division weights must be finite and non-negative".into()));
        }
        if let Some(q) = self.lambda_q {
            if !(q.is_finite() && q > 0.0) {
                return Err(TrackError::InvalidConfig("lambda_q must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub lin: f64,
    pub gap: f64,
    pub dev: f64,
    pub ratio: f64,
    pub rank: f64,
}

impl Penalties {
    pub fn as_array(&self) -> [f64; 5] {
        [self.lin, self.gap, self.dev, self.ratio, self.rank]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    /// `λ_lin·lin + λ_gap·gap + λ_dev·dev + λ_rat·ratio + λ_rank·rank`.
    pub fn combined(&self, w: &DivisionWeights) -> f64 {
        w.lin * self.lin + w.gap * self.gap + w.dev * self.dev + w.rat * self.ratio + w.rank * self.rank
    }
}

/// A plausible children pair of the next frame, by cell index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCandidate {
    /// Indices into the next frame, first < second.
    pub pair: (usize, usize),
    pub penalties: Penalties,
    /// Most likely parent, by index into the current frame.
    pub parent: Option<usize>,
}

impl PairCandidate {
    pub fn is_feasible(&self) -> bool {
        self.parent.is_some() && self.penalties.is_finite()
    }

    pub fn shares_cell(&self, other: &PairCandidate) -> bool {
        let (a, b) = self.pair;
        let (c, d) = other.pair;
        a == c || a == d || b == c || b == d
    }
}

/// Parent with its two children, by index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortLineage {
    pub parent: usize,
    pub children: (usize, usize),
    pub distortion: f64,
}

/// `λ_cen·cen + λ_siz·siz + λ_ang·ang` for parent `b` and children `b1`, `b2`.
pub fn distortion(b: &Cell, b1: &Cell, b2: &Cell, w: &DivisionWeights) -> f64 {
    let cen = b.center.distance(b1.center.midpoint(b2.center));
    let siz = (b.length - (b1.length + b2.length)).abs();
    let a = b.axis();
    let ang = line_angle(a, b1.axis()) + line_angle(a, b2.axis()) + line_angle(a, b2.center - b1.center);
    w.cen * cen + w.siz * siz + w.ang * ang
}

/// Short-lineage feasibility: both children centers within `w + ‖A‖/4` of
/// the parent center.
pub fn shlin_feasible(b: &Cell, b1: &Cell, b2: &Cell, w: f64) -> bool {
    let bound = w + 0.25 * b.length;
    b1.center.distance(b.center) <= bound && b2.center.distance(b.center) <= bound
}

/// Distortion-minimizing feasible parent and its distortion (the lineage
/// penalty). Ties go to the lowest parent index.
pub fn estimate_parent(b1: &Cell, b2: &Cell, frame: &Frame, w: f64, weights: &DivisionWeights) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in frame.cells.iter().enumerate() {
        if !shlin_feasible(b, b1, b2, w) {
            continue;
        }
        let d = distortion(b, b1, b2, weights);
        if !best.is_some_and(|(_, bd)| d >= bd) {
            best = Some((i, d));
        }
    }
    best
}

/// Closest tips of two cells and their distance.
pub fn closest_tips(b1: &Cell, b2: &Cell) -> (Vec2, Vec2, f64) {
    let mut best = (b1.endpoints.0, b2.endpoints.0, f64::INFINITY);
    for x in b1.tips() {
        for y in b2.tips() {
            let d = x.distance(y);
            if d < best.2 {
                best = (x, y, d);
            }
        }
    }
    best
}

fn distance_to_line(p: Vec2, a: Vec2, dir: Vec2) -> f64 {
    (p - a).cross(dir).abs()
}

/// `(gap, dev, ratio, rank)` of a candidate pair; `l_min` is the shortest
/// cell length in the next frame. Coincident centers give `dev = ∞`.
pub fn pair_penalties(b1: &Cell, b2: &Cell, l_min: f64) -> (f64, f64, f64, f64) {
    let (x1, x2, gap) = closest_tips(b1, b2);
    let sep = b2.center - b1.center;
    let dev = match sep.normalized() {
        Some(dir) => {
            (distance_to_line(x1, b1.center, dir) + distance_to_line(x2, b1.center, dir)) / sep.norm()
        }
        None => f64::INFINITY,
    };
    let (l1, l2) = (b1.length, b2.length);
    let ratio = (l1 / l2 + l2 / l1 - 2.0).abs();
    let rank = (l1 / l_min - 1.0).abs() + (l2 / l_min - 1.0).abs();
    (gap, dev, ratio, rank)
}

/// Every unordered pair of `next` with center distance `< tau`, scored.
/// Pairs without a feasible parent get `lin = ∞`.
pub fn build_pch(frame: &Frame, next: &Frame, tau: f64, w: f64, weights: &DivisionWeights) -> Vec<PairCandidate> {
    let cells = &next.cells;
    let Some(l_min) = next.min_length() else { return Vec::new() };
    (0..cells.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..cells.len()).filter_map(move |j| {
                let (b1, b2) = (&cells[i], &cells[j]);
                if b1.center.distance(b2.center) >= tau {
                    return None;
                }
                let (gap, dev, ratio, rank) = pair_penalties(b1, b2, l_min);
                let est = estimate_parent(b1, b2, frame, w, weights);
                let lin = est.map_or(f64::INFINITY, |(_, d)| d);
                Some(PairCandidate {
                    pair: (i, j),
                    penalties: Penalties { lin, gap, dev, ratio, rank },
                    parent: est.map(|(p, _)| p),
                })
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrimMode {
    /// Drop a candidate only when every configured penalty exceeds its bound.
    #[default]
    AllExceed,
    /// Drop a candidate as soon as one configured penalty exceeds its bound.
    AnyExceed,
}

/// Optional per-penalty upper bounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimThresholds {
    pub lin: Option<f64>,
    pub gap: Option<f64>,
    pub dev: Option<f64>,
    pub ratio: Option<f64>,
    pub rank: Option<f64>,
    pub mode: TrimMode,
}

impl TrimThresholds {
    fn bounds(&self) -> [Option<f64>; 5] {
        [self.lin, self.gap, self.dev, self.ratio, self.rank]
    }

    pub fn is_empty(&self) -> bool {
        self.bounds().iter().all(Option::is_none)
    }

    /// Bounds at the `q`-quantile of each penalty over a set of known true
    /// pairs (nearest-rank), scaled by `1 + margin`.
    pub fn from_true_pairs(true_pairs: &[Penalties], q: f64, margin: f64, mode: TrimMode) -> Self {
        if true_pairs.is_empty() {
            return TrimThresholds { mode, ..Default::default() };
        }
        let quant = |k: usize| {
            let mut v: Vec<f64> = true_pairs.iter().map(|p| p.as_array()[k]).filter(|x| x.is_finite()).collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            let idx = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            Some(v[idx] * (1.0 + margin))
        };
        TrimThresholds { lin: quant(0), gap: quant(1), dev: quant(2), ratio: quant(3), rank: quant(4), mode }
    }

    /// `true` when the candidate survives trimming.
    pub fn keeps(&self, p: &Penalties) -> bool {
        let values = p.as_array();
        let mut configured = 0;
        let mut exceeded = 0;
        for (v, b) in values.iter().zip(self.bounds()) {
            if let Some(b) = b {
                configured += 1;
                if *v > b {
                    exceeded += 1;
                }
            }
        }
        match self.mode {
            TrimMode::AllExceed => configured == 0 || exceeded < configured,
            TrimMode::AnyExceed => exceeded == 0,
        }
    }
}

pub fn trim_candidates(candidates: Vec<PairCandidate>, thresholds: &TrimThresholds) -> Vec<PairCandidate> {
    candidates.into_iter().filter(|c| thresholds.keeps(&c.penalties)).collect()
}

/// Row of the penalty scatter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub candidate_id: usize,
    pub is_true_pair: Option<bool>,
    pub lin: f64,
    pub gap: f64,
    pub dev: f64,
    pub ratio: f64,
    pub rank: f64,
}

/// Scatter rows; `truth` holds true pairs as sorted next-frame indices.
pub fn scatter_rows(candidates: &[PairCandidate], truth: Option<&HashSet<(usize, usize)>>) -> Vec<ScatterRow> {
    candidates
        .iter()
        .enumerate()
        .map(|(k, c)| ScatterRow {
            candidate_id: k,
            is_true_pair: truth.map(|t| t.contains(&c.pair)),
            lin: c.penalties.lin,
            gap: c.penalties.gap,
            dev: c.penalties.dev,
            ratio: c.penalties.ratio,
            rank: c.penalties.rank,
        })
        .collect()
}

/// Size of the largest set of pairwise cell-disjoint candidates.
pub fn max_disjoint_pairs(candidates: &[PairCandidate]) -> usize {
    let n = candidates.iter().map(|c| c.pair.1 + 1).max().unwrap_or(0);
    let mut g = UnGraph::<(), ()>::with_capacity(n, candidates.len());
    for _ in 0..n {
        g.add_node(());
    }
    for c in candidates {
        g.add_edge((c.pair.0 as u32).into(), (c.pair.1 as u32).into(), ());
    }
    maximum_matching(&g).len()
}

/// Binary selection problem `E(z) = ⟨V,z⟩ + λ_Q⟨z,Qz⟩` under `⟨ONE,z⟩ = DIV`.
#[derive(Clone, Debug)]
pub struct ChildrenBmProblem {
    pub candidates: Vec<PairCandidate>,
    pub v: Vec<f64>,
    /// Sparse rows of `Q`: candidates sharing a cell.
    pub q: Vec<Vec<usize>>,
    /// Candidates sharing an estimated parent (empty rows when disabled).
    pub parent_q: Vec<Vec<usize>>,
    pub div_count: usize,
    pub lambda_q: f64,
    pub max_disjoint: usize,
    pub infeasible: bool,
    pub bm: CliqueProblem,
}

pub fn build_children_bm(
    candidates: Vec<PairCandidate>,
    div_count: usize,
    weights: &DivisionWeights,
) -> Result<ChildrenBmProblem> {
    weights.validate()?;
    if div_count == 0 {
        return Err(TrackError::InvalidConfig("children pairing needs at least one division".into()));
    }
    if let Some(c) = candidates.iter().find(|c| !c.is_feasible()) {
        return Err(TrackError::InvalidConfig(format!("candidate {:?} has no finite penalties", c.pair)));
    }
    let m = candidates.len();
    let v: Vec<f64> = candidates.iter().map(|c| c.penalties.combined(weights)).collect();
    let max_v = v.iter().copied().fold(0.0, f64::max);
    let lambda_q = weights.lambda_q.unwrap_or(if max_v > 0.0 { 10.0 * max_v } else { 1.0 });

    let mut q = vec![Vec::new(); m];
    let mut parent_q = vec![Vec::new(); m];
    // Candidates touching each cell, to find overlaps without an m² scan.
    let n_cells = candidates.iter().map(|c| c.pair.1 + 1).max().unwrap_or(0);
    let mut by_cell = vec![Vec::new(); n_cells];
    for (k, c) in candidates.iter().enumerate() {
        by_cell[c.pair.0].push(k);
        by_cell[c.pair.1].push(k);
    }
    for list in &by_cell {
        for (a, &j) in list.iter().enumerate() {
            for &k in &list[a + 1..] {
                q[j].push(k);
                q[k].push(j);
            }
        }
    }
    if weights.parent_conflicts {
        let n_parents = candidates.iter().filter_map(|c| c.parent).max().map_or(0, |p| p + 1);
        let mut by_parent = vec![Vec::new(); n_parents];
        for (k, c) in candidates.iter().enumerate() {
            by_parent[c.parent.expect("feasible")].push(k);
        }
        for list in &by_parent {
            for (a, &j) in list.iter().enumerate() {
                for &k in &list[a + 1..] {
                    if !q[j].contains(&k) {
                        parent_q[j].push(k);
                        parent_q[k].push(j);
                    }
                }
            }
        }
    }
    for row in q.iter_mut().chain(parent_q.iter_mut()) {
        row.sort_unstable();
        row.dedup();
    }

    let mut bm = CliqueProblem::new(vec![2; m])?;
    for (j, &vj) in v.iter().enumerate() {
        bm.add_unary(j, vec![0.0, vj])?;
    }
    for j in 0..m {
        for &k in q[j].iter().chain(&parent_q[j]) {
            if k > j {
                bm.add_clique(&[j, k], CliqueTable::Dense(vec![0.0, 0.0, 0.0, 2.0 * lambda_q]))?;
            }
        }
    }

    let max_disjoint = max_disjoint_pairs(&candidates);
    let infeasible = max_disjoint < div_count;
    Ok(ChildrenBmProblem { candidates, v, q, parent_q, div_count, lambda_q, max_disjoint, infeasible, bm })
}

impl ChildrenBmProblem {
    pub fn m(&self) -> usize {
        self.candidates.len()
    }

    /// Energy of a selection given as 0/1 states.
    pub fn energy(&self, z: &[usize]) -> f64 {
        let mut e = 0.0;
        for j in 0..self.m() {
            if z[j] == 1 {
                e += self.v[j];
                for &k in self.q[j].iter().chain(&self.parent_q[j]) {
                    if z[k] == 1 {
                        e += self.lambda_q;
                    }
                }
            }
        }
        e
    }

    /// Greedy start: lowest-energy candidates that conflict with nothing
    /// chosen so far, topped up by the cheapest leftovers.
    pub fn greedy_selection(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.m()).collect();
        order.sort_by(|&a, &b| self.v[a].total_cmp(&self.v[b]).then(a.cmp(&b)));
        let mut z = vec![0usize; self.m()];
        let mut chosen = 0;
        for &j in &order {
            if chosen == k {
                break;
            }
            let clash = self.q[j].iter().chain(&self.parent_q[j]).any(|&c| z[c] == 1);
            if !clash {
                z[j] = 1;
                chosen += 1;
            }
        }
        for &j in &order {
            if chosen == k {
                break;
            }
            if z[j] == 0 {
                z[j] = 1;
                chosen += 1;
            }
        }
        z
    }
}

/// Steepest descent over all swaps of one selected and one unselected site.
fn polish_swaps(bm: &CliqueProblem, z: &mut [usize]) {
    loop {
        let ones: Vec<usize> = (0..z.len()).filter(|&j| z[j] == 1).collect();
        let zeros: Vec<usize> = (0..z.len()).filter(|&j| z[j] == 0).collect();
        let mut best = (0, 0, -1e-12);
        for &j in &ones {
            for &k in &zeros {
                let d = bm.pair_delta(z, j, 0, k, 1);
                if d < best.2 {
                    best = (j, k, d);
                }
            }
        }
        if best.2 >= -1e-12 {
            return;
        }
        z[best.0] = 0;
        z[best.1] = 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChildrenSolution {
    /// Indices of the selected candidates, ascending.
    pub selected: Vec<usize>,
    pub energy: f64,
    pub trace: Vec<TraceRow>,
    pub epochs: usize,
}

/// Selects `DIV` candidates by swap-dynamics annealing from the greedy start,
/// finishing with a swap descent. With `relax`, one division fewer is
/// accepted when only `DIV − 1` disjoint pairs exist.
pub fn solve_children(
    problem: &ChildrenBmProblem,
    schedule: &Schedule,
    seed: u64,
    relax: bool,
) -> Result<ChildrenSolution> {
    let mut k = problem.div_count;
    if problem.infeasible {
        if relax && problem.max_disjoint + 1 >= k && k > 1 {
            k -= 1;
        } else {
            return Err(TrackError::Infeasible(format!(
                "{} divisions expected but at most {} disjoint children pairs exist",
                problem.div_count, problem.max_disjoint
            )));
        }
    }
    let init = problem.greedy_selection(k);
    let m = problem.m();
    let mut schedule = schedule.clone();
    if schedule.stability_window.is_none() {
        schedule.stability_window = Some((k * (m - k)).max(m).max(1));
    }
    let result = anneal(&problem.bm, init, Dynamics::Swap, &schedule, seed)?;
    let mut z = result.best.states;
    polish_swaps(&problem.bm, &mut z);
    let energy = problem.bm.energy(&z);
    Ok(ChildrenSolution {
        selected: (0..m).filter(|&j| z[j] == 1).collect(),
        energy,
        trace: result.trace,
        epochs: result.epochs,
    })
}

/// Exhaustive minimum over all `DIV`-subsets. For tests and small problems.
pub fn exhaustive_subset_minimum(problem: &ChildrenBmProblem) -> (Vec<usize>, f64) {
    fn rec(p: &ChildrenBmProblem, start: usize, left: usize, z: &mut Vec<usize>, best: &mut (Vec<usize>, f64)) {
        if left == 0 {
            let e = p.bm.energy(z);
            if e < best.1 {
                *best = ((0..z.len()).filter(|&j| z[j] == 1).collect(), e);
            }
            return;
        }
        for j in start..=z.len() - left {
            z[j] = 1;
            rec(p, j + 1, left - 1, z, best);
            z[j] = 0;
        }
    }
    let mut best = (Vec::new(), f64::INFINITY);
    let k = problem.div_count.min(problem.m());
    rec(problem, 0, k, &mut vec![0; problem.m()], &mut best);
    best
}

/// Triplets of the selected candidates.
pub fn lineages_from_selection(problem: &ChildrenBmProblem, selected: &[usize]) -> Vec<ShortLineage> {
    selected
        .iter()
        .map(|&j| {
            let c = &problem.candidates[j];
            ShortLineage { parent: c.parent.expect("feasible"), children: c.pair, distortion: c.penalties.lin }
        })
        .collect()
}

/// Frames with the division triplets removed, plus index maps back to the
/// original frames and the `Divided` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Reduction {
    pub source: Frame,
    pub target: Frame,
    pub source_map: Vec<usize>,
    pub target_map: Vec<usize>,
    pub divided: Vec<LineageEntry>,
}

pub fn reduce_frames(frame: &Frame, next: &Frame, lineages: &[ShortLineage]) -> Result<Reduction> {
    let mut parents = HashSet::new();
    let mut children = HashSet::new();
    for l in lineages {
        if l.parent >= frame.len() || l.children.0 >= next.len() || l.children.1 >= next.len() {
            return Err(TrackError::InvalidConfig("lineage index out of range".into()));
        }
        if !parents.insert(l.parent)
            || l.children.0 == l.children.1
            || !children.insert(l.children.0)
            || !children.insert(l.children.1)
        {
            return Err(TrackError::NonDisjointLineages(format!(
                "parent {} or children {:?} used twice",
                frame.cells[l.parent].id, l.children
            )));
        }
    }
    let source_map: Vec<usize> = (0..frame.len()).filter(|i| !parents.contains(i)).collect();
    let target_map: Vec<usize> = (0..next.len()).filter(|i| !children.contains(i)).collect();
    let divided = lineages
        .iter()
        .map(|l| LineageEntry::Divided {
            source: frame.cells[l.parent].id.clone(),
            children: (next.cells[l.children.0].id.clone(), next.cells[l.children.1].id.clone()),
        })
        .collect();
    Ok(Reduction {
        source: frame.subset(&source_map),
        target: next.subset(&target_map),
        source_map,
        target_map,
        divided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rect;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn frame(index: usize, cells: Vec<Cell>) -> Frame {
        Frame::new(index, cells, Rect::from_size(1000.0, 1000.0)).unwrap()
    }

    fn cap(id: usize, x: f64, y: f64, angle: f64, len: f64) -> Cell {
        Cell::capsule(id, Vec2::new(x, y), angle, len, 6.0).unwrap()
    }

    fn random_cell(rng: &mut ChaCha8Rng, id: usize) -> Cell {
        cap(
            id,
            rng.random_range(100.0..200.0),
            rng.random_range(100.0..200.0),
            rng.random_range(0.0..PI),
            rng.random_range(8.0..30.0),
        )
    }

    // Oracle: angles through acos of normalized dot products.
    fn oracle_angle(u: Vec2, v: Vec2) -> f64 {
        if u.norm() == 0.0 || v.norm() == 0.0 {
            return 0.0;
        }
        let c = (u.dot(v) / (u.norm() * v.norm())).abs().min(1.0);
        c.acos()
    }

    fn oracle_distortion(b: &Cell, b1: &Cell, b2: &Cell, w: &DivisionWeights) -> f64 {
        let mid = Vec2::new((b1.center.x + b2.center.x) / 2.0, (b1.center.y + b2.center.y) / 2.0);
        let cen = ((b.center.x - mid.x).powi(2) + (b.center.y - mid.y).powi(2)).sqrt();
        let siz = (b.length - b1.length - b2.length).abs();
        let a = b.endpoints.1 - b.endpoints.0;
        let ang = oracle_angle(a, b1.endpoints.1 - b1.endpoints.0)
            + oracle_angle(a, b2.endpoints.1 - b2.endpoints.0)
            + oracle_angle(a, b2.center - b1.center);
        w.cen * cen + w.siz * siz + w.ang * ang
    }

    // Oracle: gap over the four tip pairs, dev through the point-line formula
    // |ax + by + c| / sqrt(a² + b²).
    fn oracle_pair(b1: &Cell, b2: &Cell, l_min: f64) -> (f64, f64, f64, f64) {
        let tips1 = [b1.endpoints.0, b1.endpoints.1];
        let tips2 = [b2.endpoints.0, b2.endpoints.1];
        let mut best = (0, 0, f64::INFINITY);
        for (i, x) in tips1.iter().enumerate() {
            for (j, y) in tips2.iter().enumerate() {
                let d = ((x.x - y.x).powi(2) + (x.y - y.y).powi(2)).sqrt();
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (c1, c2) = (b1.center, b2.center);
        let (a, b, c) = (c2.y - c1.y, c1.x - c2.x, c2.x * c1.y - c1.x * c2.y);
        let norm = (a * a + b * b).sqrt();
        let line = |p: Vec2| (a * p.x + b * p.y + c).abs() / norm;
        let dev = (line(tips1[best.0]) + line(tips2[best.1])) / norm;
        let (l1, l2) = (b1.length, b2.length);
        (best.2, dev, (l1 / l2 + l2 / l1 - 2.0).abs(), (l1 / l_min - 1.0).abs() + (l2 / l_min - 1.0).abs())
    }

    #[test]
    fn pch_boundary_is_strict() {
        let parent = frame(0, vec![cap(0, 100.0, 100.0, 0.0, 40.0)]);
        let next = frame(1, vec![cap(0, 100.0, 100.0, 0.0, 20.0), cap(1, 144.0, 100.0, 0.0, 20.0), cap(2, 100.0, 145.0, 0.0, 20.0)]);
        let pch = build_pch(&parent, &next, 45.0, 45.0, &DivisionWeights::default());
        let pairs: Vec<_> = pch.iter().map(|c| c.pair).collect();
        assert!(pairs.contains(&(0, 1)));
        assert!(!pairs.contains(&(0, 2)));
    }

    #[test]
    fn pch_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cur = frame(0, (0..6).map(|i| random_cell(&mut rng, i)).collect());
        let next = frame(1, (0..10).map(|i| random_cell(&mut rng, i)).collect());
        let pch = build_pch(&cur, &next, 45.0, 45.0, &DivisionWeights::default());
        let got: HashSet<_> = pch.iter().map(|c| c.pair).collect();
        let mut want = HashSet::new();
        for i in 0..10 {
            for j in i + 1..10 {
                if next.cells[i].center.distance(next.cells[j].center) < 45.0 {
                    want.insert((i, j));
                }
            }
        }
        assert_eq!(got, want);
        assert_eq!(pch.len(), want.len());
    }

    #[test]
    fn perfect_division_has_zero_distortion() {
        let w = DivisionWeights::default();
        let b = cap(0, 100.0, 100.0, 0.0, 40.0);
        let b1 = cap(1, 90.0, 100.0, 0.0, 20.0);
        let b2 = cap(2, 110.0, 100.0, 0.0, 20.0);
        assert!(distortion(&b, &b1, &b2, &w).abs() < 1e-12);
        let r1 = cap(1, 90.0, 100.0, FRAC_PI_2, 20.0);
        let r2 = cap(2, 110.0, 100.0, FRAC_PI_2, 20.0);
        let rb = cap(0, 100.0, 100.0, FRAC_PI_2, 40.0);
        let d = distortion(&rb, &r1, &r2, &w);
        // Children axes parallel to the parent, their center line orthogonal.
        assert!((d - w.ang * FRAC_PI_2).abs() < 1e-12);
        let d = distortion(&b, &r1, &r2, &w);
        assert!((d - w.ang * (FRAC_PI_2 + FRAC_PI_2)).abs() < 1e-12);
        let v1 = cap(1, 100.0, 90.0, FRAC_PI_2, 20.0);
        let v2 = cap(2, 100.0, 110.0, FRAC_PI_2, 20.0);
        assert!((distortion(&b, &v1, &v2, &w) - w.ang * 3.0 * FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn ideal_newborn_pair_scores_zero() {
        let b1 = Cell::from_endpoints(1, Vec2::new(80.0, 100.0), Vec2::new(100.0, 100.0), 6.0).unwrap();
        let b2 = Cell::from_endpoints(2, Vec2::new(100.0, 100.0), Vec2::new(120.0, 100.0), 6.0).unwrap();
        let (gap, dev, ratio, rank) = pair_penalties(&b1, &b2, 20.0);
        assert_eq!((gap, dev, ratio, rank), (0.0, 0.0, 0.0, 0.0));
        let b3 = cap(3, 100.0, 130.0, 0.0, 10.0);
        assert!((pair_penalties(&b1, &b3, 10.0).2 - 0.5).abs() < 1e-12);
        let same = pair_penalties(&b1, &b1.clone(), 20.0);
        assert!(same.1.is_infinite());
    }

    #[test]
    fn parent_estimation_cases() {
        let w = DivisionWeights::default();
        let b1 = cap(1, 90.0, 100.0, 0.0, 20.0);
        let b2 = cap(2, 110.0, 100.0, 0.0, 20.0);
        let lone = frame(0, vec![cap(0, 102.0, 101.0, 0.1, 38.0)]);
        let (p, lin) = estimate_parent(&b1, &b2, &lone, 45.0, &w).unwrap();
        assert_eq!(p, 0);
        assert!((lin - distortion(&lone.cells[0], &b1, &b2, &w)).abs() < 1e-15);
        let far = frame(0, vec![cap(0, 400.0, 400.0, 0.0, 40.0)]);
        assert!(estimate_parent(&b1, &b2, &far, 45.0, &w).is_none());
        // Equal distortion: lowest index wins.
        let twins = frame(0, vec![cap(0, 100.0, 100.0, 0.0, 40.0), cap(1, 100.0, 100.0, 0.0, 40.0)]);
        assert_eq!(estimate_parent(&b1, &b2, &twins, 45.0, &w).unwrap().0, 0);
    }

    #[test]
    fn trim_rules() {
        let t = TrimThresholds {
            lin: Some(1.0),
            gap: Some(1.0),
            dev: Some(1.0),
            ratio: Some(1.0),
            rank: Some(1.0),
            mode: TrimMode::AllExceed,
        };
        let all_high = Penalties { lin: 2.0, gap: 2.0, dev: 2.0, ratio: 2.0, rank: 2.0 };
        let one_low = Penalties { gap: 0.5, ..all_high };
        assert!(!t.keeps(&all_high));
        assert!(t.keeps(&one_low));
        let strict = TrimThresholds { mode: TrimMode::AnyExceed, ..t };
        assert!(!strict.keeps(&one_low));
        assert!(strict.keeps(&Penalties::default()));
        assert!(TrimThresholds::default().keeps(&all_high));
    }

    fn toy_candidates(rng: &mut ChaCha8Rng, m: usize, cells: usize) -> Vec<PairCandidate> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        while out.len() < m {
            let a = rng.random_range(0..cells);
            let b = rng.random_range(0..cells);
            if a == b || !seen.insert((a.min(b), a.max(b))) {
                continue;
            }
            out.push(PairCandidate {
                pair: (a.min(b), a.max(b)),
                penalties: Penalties {
                    lin: rng.random_range(0.0..5.0),
                    gap: rng.random_range(0.0..10.0),
                    dev: rng.random_range(0.0..1.0),
                    ratio: rng.random_range(0.0..1.0),
                    rank: rng.random_range(0.0..2.0),
                },
                parent: Some(rng.random_range(0..cells)),
            });
        }
        out
    }

    #[test]
    fn overlap_energy() {
        let c = |a, b| PairCandidate { pair: (a, b), penalties: Penalties::default(), parent: Some(a) };
        let p = build_children_bm(vec![c(0, 1), c(1, 2), c(3, 4)], 1, &DivisionWeights { lambda_q: Some(5.0), ..Default::default() })
            .unwrap();
        assert_eq!(p.energy(&[0, 0, 0]), 0.0);
        assert_eq!(p.energy(&[1, 1, 0]), 10.0);
        assert_eq!(p.bm.energy(&[1, 1, 0]), 10.0);
        assert_eq!(p.q[0], vec![1]);
        assert!(p.q[2].is_empty());
    }

    #[test]
    fn swap_matches_exhaustive_on_five_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let cands = toy_candidates(&mut rng, 5, 7);
            let p = build_children_bm(cands, 2, &DivisionWeights::default()).unwrap();
            if p.infeasible {
                continue;
            }
            let (_, opt) = exhaustive_subset_minimum(&p);
            let sol = solve_children(&p, &Schedule::children(), seed, false).unwrap();
            assert_eq!(sol.selected.len(), 2);
            assert!((sol.energy - opt).abs() < 1e-9);
        }
    }

    #[test]
    fn swap_annealing_hits_subset_minimum_on_ten_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = loop {
            let p = build_children_bm(toy_candidates(&mut rng, 10, 12), 3, &DivisionWeights::default()).unwrap();
            if !p.infeasible {
                break p;
            }
        };
        let (_, opt) = exhaustive_subset_minimum(&p);
        let hits = (0..100)
            .filter(|&seed| {
                let sol = solve_children(&p, &Schedule::children(), seed, false).unwrap();
                (sol.energy - opt).abs() < 1e-9
            })
            .count();
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn infeasible_when_too_few_disjoint_pairs() {
        let c = |a, b| PairCandidate { pair: (a, b), penalties: Penalties::default(), parent: Some(0) };
        let p = build_children_bm(vec![c(0, 1), c(1, 2), c(0, 2)], 2, &DivisionWeights::default()).unwrap();
        assert!(p.infeasible);
        assert_eq!(p.max_disjoint, 1);
        assert!(matches!(solve_children(&p, &Schedule::children(), 0, false), Err(TrackError::Infeasible(_))));
        let relaxed = solve_children(&p, &Schedule::children(), 0, true).unwrap();
        assert_eq!(relaxed.selected.len(), 1);
    }

    #[test]
    fn reduction_removes_triplets() {
        let cur = frame(0, (0..3).map(|i| cap(i, 50.0 * i as f64 + 50.0, 50.0, 0.0, 20.0)).collect());
        let next = frame(1, (0..4).map(|i| cap(i, 40.0 * i as f64 + 50.0, 80.0, 0.0, 12.0)).collect());
        let r = reduce_frames(&cur, &next, &[ShortLineage { parent: 1, children: (1, 2), distortion: 0.0 }]).unwrap();
        assert_eq!(r.source_map, vec![0, 2]);
        assert_eq!(r.target_map, vec![0, 3]);
        assert_eq!(r.source.len(), r.target.len());
        let none = reduce_frames(&cur, &cur, &[]).unwrap();
        assert_eq!(none.source, cur);
        let dup = [
            ShortLineage { parent: 0, children: (0, 1), distortion: 0.0 },
            ShortLineage { parent: 0, children: (2, 3), distortion: 0.0 },
        ];
        assert!(matches!(reduce_frames(&cur, &next, &dup), Err(TrackError::NonDisjointLineages(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn distortion_matches_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = DivisionWeights::default();
            let (b, b1, b2) = (random_cell(&mut rng, 0), random_cell(&mut rng, 1), random_cell(&mut rng, 2));
            prop_assert!((distortion(&b, &b1, &b2, &w) - oracle_distortion(&b, &b1, &b2, &w)).abs() < 1e-9);
        }

        #[test]
        fn pair_penalties_match_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b1, b2) = (random_cell(&mut rng, 1), random_cell(&mut rng, 2));
            let got = pair_penalties(&b1, &b2, 8.0);
            let want = oracle_pair(&b1, &b2, 8.0);
            prop_assert!((got.0 - want.0).abs() < 1e-9);
            prop_assert!((got.1 - want.1).abs() < 1e-9);
            prop_assert!((got.2 - want.2).abs() < 1e-12);
            prop_assert!((got.3 - want.3).abs() < 1e-12);
            prop_assert!(got.0 >= 0.0 && got.1 >= 0.0 && got.2 >= 0.0 && got.3 >= 0.0);
        }

        #[test]
        fn parent_estimate_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = DivisionWeights::default();
            let cur = frame(0, (0..8).map(|i| random_cell(&mut rng, i)).collect());
            let (b1, b2) = (random_cell(&mut rng, 1), random_cell(&mut rng, 2));
            let a = estimate_parent(&b1, &b2, &cur, 45.0, &w);
            let b = estimate_parent(&b2, &b1, &cur, 45.0, &w);
            prop_assert_eq!(a.map(|x| x.0), b.map(|x| x.0));
            if let (Some(a), Some(b)) = (a, b) {
                prop_assert!((a.1 - b.1).abs() < 1e-12);
            }
        }
    }
}
