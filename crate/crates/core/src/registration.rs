//! Division-free registration between two frames of equal cardinality.
//!
//! The cost of a mapping `f` combines four penalties:
//!
//! * `match`: mean negative log-likelihood of each cell's move, with the
//!   likelihood read off empirical CDFs of kinetic, length and rotation terms;
//! * `over`: ordered pairs of distinct sources sent to the same target;
//! * `stab`: neighbor pairs whose images are not neighbors;
//! * `flip`: neighbor triplets whose orientation is mirrored by `f`.
//!
//! The cost is factored over cliques of one, two and three cells so that
//! [`crate::annealer`] can minimize it with local energy updates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::annealer::{anneal, CliqueProblem, CliqueTable, Dynamics, Schedule, TraceRow};
use crate::error::{Result, TrackError};
use crate::geometry::{build_neighbor_graph, line_angle, target_window, Cell, CellId, Frame, NeighborGraph};

/// Joint likelihood floor.
pub const LIK_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationWeights {
    #[serde(rename = "match")]
    pub match_: f64,
    pub over: f64,
    pub stab: f64,
    pub flip: f64,
}

impl Default for RegistrationWeights {
    fn default() -> Self {
        RegistrationWeights { match_: 110.0, over: 300.0, stab: 300.0, flip: 290.0 }
    }
}

impl RegistrationWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.match_, self.over, self.stab, self.flip]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        RegistrationWeights { match_: v[0], over: v[1], stab: v[2], flip: v[3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrackError::InvalidConfig("registration weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Kinetic, length and rotation penalties of moving `b` to `next`.
///
/// `growth` is the expected length ratio over one interframe.
pub fn pair_penalties(b: &Cell, next: &Cell, growth: f64) -> (f64, f64, f64) {
    let kin = (b.center - next.center).norm_sq();
    let dis = ((next.length / b.length).ln() - growth.ln()).powi(2);
    let rot = line_angle(b.axis(), next.axis());
    (kin, dis, rot)
}

/// Right-continuous empirical CDF.
#[derive(Clone, Debug, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(mut samples: Vec<f64>) -> Self {
        samples.retain(|x| !x.is_nan());
        samples.sort_by(f64::total_cmp);
        Ecdf { sorted: samples }
    }

    /// `#{samples ≤ x} / #samples`; zero for an empty sample.
    pub fn cdf(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }
}

/// Empirical likelihood of a cell move.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodModel {
    pub cdf_kin: Ecdf,
    pub cdf_dis: Ecdf,
    pub cdf_rot: Ecdf,
    pub floor: f64,
    pub growth: f64,
}

fn two_smallest(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.truncate(2);
    v
}

impl LikelihoodModel {
    /// Builds the three CDFs from the two smallest values of each penalty
    /// over every source cell's window (fewer when the window is smaller).
    pub fn fit(source: &Frame, target: &Frame, windows: &[Vec<usize>], growth: f64) -> Self {
        let (mut kin, mut dis, mut rot) = (Vec::new(), Vec::new(), Vec::new());
        for (b, window) in source.cells.iter().zip(windows) {
            let triples: Vec<_> = window.iter().map(|&t| pair_penalties(b, &target.cells[t], growth)).collect();
            kin.extend(two_smallest(triples.iter().map(|t| t.0)));
            dis.extend(two_smallest(triples.iter().map(|t| t.1)));
            rot.extend(two_smallest(triples.iter().map(|t| t.2)));
        }
        LikelihoodModel {
            cdf_kin: Ecdf::new(kin),
            cdf_dis: Ecdf::new(dis),
            cdf_rot: Ecdf::new(rot),
            floor: LIK_FLOOR,
            growth,
        }
    }

    pub fn factors(&self, b: &Cell, next: &Cell) -> (f64, f64, f64) {
        let (kin, dis, rot) = pair_penalties(b, next, self.growth);
        self.factors_of(kin, dis, rot)
    }

    pub fn factors_of(&self, kin: f64, dis: f64, rot: f64) -> (f64, f64, f64) {
        (1.0 - self.cdf_kin.cdf(kin), 1.0 - self.cdf_dis.cdf(dis), 1.0 - self.cdf_rot.cdf(rot))
    }

    /// Joint likelihood, floored.
    pub fn likelihood(&self, b: &Cell, next: &Cell) -> f64 {
        let (k, d, r) = self.factors(b, next);
        (k * d * r).max(self.floor)
    }
}

/// The four unweighted penalties of a mapping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    #[serde(rename = "match")]
    pub match_: f64,
    pub over: f64,
    pub stab: f64,
    pub flip: f64,
}

impl CostTerms {
    pub fn as_array(&self) -> [f64; 4] {
        [self.match_, self.over, self.stab, self.flip]
    }

    pub fn weighted(&self, w: &RegistrationWeights) -> f64 {
        w.match_ * self.match_ + w.over * self.over + w.stab * self.stab + w.flip * self.flip
    }
}

#[inline]
fn orientation(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Clone, Debug)]
pub struct RegistrationProblem {
    pub source: Frame,
    pub target: Frame,
    /// Candidate target indices per source cell, ascending.
    pub windows: Vec<Vec<usize>>,
    /// Source cells whose empty window was padded with the nearest target.
    pub padded: Vec<usize>,
    pub source_graph: NeighborGraph,
    pub target_graph: NeighborGraph,
    pub weights: RegistrationWeights,
    pub likelihood: LikelihoodModel,
    /// Joint likelihood per source and window slot.
    pub lik: Vec<Vec<f64>>,
    /// Kinetic penalty per source and window slot, for tie-breaking.
    pub kin: Vec<Vec<f64>>,
    pub bm: CliqueProblem,
}

/// Per-source flip triplets `(i, j, k)` with `j < k` both neighbors of `i`.
fn flip_triplets(graph: &NeighborGraph) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..graph.len() {
        let nb = graph.neighbors(i);
        for (a, &j) in nb.iter().enumerate() {
            for &k in &nb[a + 1..] {
                out.push((i, j, k));
            }
        }
    }
    out
}

impl RegistrationProblem {
    pub fn build(
        source: &Frame,
        target: &Frame,
        w: f64,
        rho: f64,
        weights: RegistrationWeights,
        growth: f64,
    ) -> Result<Self> {
        weights.validate()?;
        if !(w > 0.0 && rho > 0.0 && growth > 0.0) {
            return Err(TrackError::InvalidConfig("w, rho and growth must be positive".into()));
        }
        if source.len() != target.len() {
            log::warn!(
                "registration between frames of different sizes ({} vs {})",
                source.len(),
                target.len()
            );
        }
        if target.is_empty() && !source.is_empty() {
            return Err(TrackError::InvalidFrame { frame: target.index, reason: "empty target frame".into() });
        }
        let n = source.len();
        let n_target = target.len();
        let mut padded = Vec::new();
        let windows: Vec<Vec<usize>> = source
            .cells
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let win = target_window(b, target, w);
                if !win.is_empty() {
                    return win;
                }
                padded.push(i);
                let nearest = (0..n_target)
                    .min_by(|&x, &y| {
                        let dx = target.cells[x].center.distance(b.center);
                        let dy = target.cells[y].center.distance(b.center);
                        dx.total_cmp(&dy)
                    })
                    .expect("non-empty target");
                vec![nearest]
            })
            .collect();
        if !padded.is_empty() {
            log::warn!("{} source cells had empty windows and were padded", padded.len());
        }

        let source_graph = build_neighbor_graph(source, rho);
        let target_graph = build_neighbor_graph(target, rho);
        let likelihood = LikelihoodModel::fit(source, target, &windows, growth);

        let mut lik = Vec::with_capacity(n);
        let mut kin = Vec::with_capacity(n);
        for (b, win) in source.cells.iter().zip(&windows) {
            let mut l = Vec::with_capacity(win.len());
            let mut k = Vec::with_capacity(win.len());
            for &t in win {
                let (pk, pd, pr) = pair_penalties(b, &target.cells[t], growth);
                let (fk, fd, fr) = likelihood.factors_of(pk, pd, pr);
                l.push((fk * fd * fr).max(likelihood.floor));
                k.push(pk);
            }
            lik.push(l);
            kin.push(k);
        }

        let mut bm = CliqueProblem::new(windows.iter().map(Vec::len).collect())?;
        let nf = n.max(1) as f64;

        // CL1: match.
        for (i, l) in lik.iter().enumerate() {
            bm.add_unary(i, l.iter().map(|&x| -weights.match_ * x.ln() / nf).collect())?;
        }

        // Slot of every target in every window.
        let mut slot = vec![u32::MAX; n * n_target];
        for (i, win) in windows.iter().enumerate() {
            for (p, &t) in win.iter().enumerate() {
                slot[i * n_target + t] = p as u32;
            }
        }
        let slot_of = |i: usize, t: usize| -> Option<usize> {
            let s = slot[i * n_target + t];
            (s != u32::MAX).then_some(s as usize)
        };

        // CL2: neighbor pairs carry overlap and stability.
        for (i, j) in source_graph.edges() {
            let (wi, wj) = (&windows[i], &windows[j]);
            let stab = 2.0 * weights.stab / (nf * source_graph.degree(i) as f64 * source_graph.degree(j) as f64);
            let over = 2.0 * weights.over / nf;
            let mut table = Vec::with_capacity(wi.len() * wj.len());
            for &ti in wi {
                for &tj in wj {
                    let mut v = 0.0;
                    if ti == tj {
                        v += over;
                    }
                    if !target_graph.are_neighbors(ti, tj) {
                        v += stab;
                    }
                    table.push(v);
                }
            }
            bm.add_clique(&[i, j], CliqueTable::Dense(table))?;
        }

        // Non-neighbor pairs with intersecting windows only carry overlap.
        let mut holders: Vec<Vec<usize>> = vec![Vec::new(); n_target];
        for (i, win) in windows.iter().enumerate() {
            for &t in win {
                holders[t].push(i);
            }
        }
        let mut shared: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (t, hs) in holders.iter().enumerate() {
            for (a, &i) in hs.iter().enumerate() {
                for &j in &hs[a + 1..] {
                    if !source_graph.are_neighbors(i, j) {
                        shared.entry((i, j)).or_default().push(t);
                    }
                }
            }
        }
        let mut shared: Vec<_> = shared.into_iter().collect();
        shared.sort_unstable_by_key(|(k, _)| *k);
        for ((i, j), targets) in shared {
            let wj = windows[j].len();
            let size = windows[i].len() * wj;
            let set = targets.iter().map(|&t| slot_of(i, t).unwrap() * wj + slot_of(j, t).unwrap());
            bm.add_clique(&[i, j], CliqueTable::indicator(2.0 * weights.over / nf, size, set))?;
        }

        // CL3: flips around each center cell.
        for (i, j, k) in flip_triplets(&source_graph) {
            let deg = source_graph.degree(i) as f64;
            let weight = 2.0 * weights.flip / (nf * deg * deg);
            let (ci, cj, ck) = (source.cells[i].center, source.cells[j].center, source.cells[k].center);
            let alpha = orientation((cj - ci).cross(ck - ci));
            let (wj, wk) = (windows[j].len(), windows[k].len());
            let mut set = Vec::new();
            if alpha != 0 {
                for (pi, &zi) in windows[i].iter().enumerate() {
                    let di = target.cells[zi].center;
                    let nb = target_graph.neighbors(zi);
                    for &zj in nb {
                        let Some(pj) = slot_of(j, zj) else { continue };
                        let dj = target.cells[zj].center - di;
                        for &zk in nb {
                            let Some(pk) = slot_of(k, zk) else { continue };
                            let beta = orientation(dj.cross(target.cells[zk].center - di));
                            if alpha * beta < 0 {
                                set.push((pi * wj + pj) * wk + pk);
                            }
                        }
                    }
                }
            }
            let size = windows[i].len() * wj * wk;
            bm.add_clique(&[i, j, k], CliqueTable::indicator(weight, size, set))?;
        }

        Ok(RegistrationProblem {
            source: source.clone(),
            target: target.clone(),
            windows,
            padded,
            source_graph,
            target_graph,
            weights,
            likelihood,
            lik,
            kin,
            bm,
        })
    }

    pub fn n(&self) -> usize {
        self.source.len()
    }

    /// Window slots of a mapping given as target indices, or `None` when
    /// some target lies outside its window.
    pub fn range(&self, f: &[usize]) -> Option<Vec<usize>> {
        f.iter().zip(&self.windows).map(|(&t, win)| win.binary_search(&t).ok()).collect()
    }

    /// Target indices of a configuration of window slots.
    pub fn map(&self, z: &[usize]) -> Vec<usize> {
        z.iter().zip(&self.windows).map(|(&s, win)| win[s]).collect()
    }

    /// Penalties of the mapping `f` (target indices), computed directly from
    /// their definitions.
    pub fn cost_terms(&self, f: &[usize]) -> CostTerms {
        let n = self.n();
        if n == 0 {
            return CostTerms::default();
        }
        let nf = n as f64;
        let cells = &self.source.cells;
        let tcells = &self.target.cells;

        let match_ = -cells
            .iter()
            .zip(f)
            .map(|(b, &t)| self.likelihood.likelihood(b, &tcells[t]).ln())
            .sum::<f64>()
            / nf;

        let mut counts = vec![0usize; self.target.len()];
        for &t in f {
            counts[t] += 1;
        }
        let over = counts.iter().map(|&c| (c * c.saturating_sub(1)) as f64).sum::<f64>() / nf;

        let g = &self.source_graph;
        let mut stab = 0.0;
        for (i, j) in g.edges() {
            if !self.target_graph.are_neighbors(f[i], f[j]) {
                stab += 2.0 / (nf * g.degree(i) as f64 * g.degree(j) as f64);
            }
        }

        let mut flip = 0.0;
        for i in 0..n {
            let deg = g.degree(i) as f64;
            for &j in g.neighbors(i) {
                for &k in g.neighbors(i) {
                    if self.flipped(f, i, j, k) {
                        flip += 1.0 / (nf * deg * deg);
                    }
                }
            }
        }
        CostTerms { match_, over, stab, flip }
    }

    /// `FLIP(f, b_i, b_j, b_k)`.
    pub fn flipped(&self, f: &[usize], i: usize, j: usize, k: usize) -> bool {
        let (zi, zj, zk) = (f[i], f[j], f[k]);
        if !(self.target_graph.are_neighbors(zi, zj) && self.target_graph.are_neighbors(zi, zk)) {
            return false;
        }
        let c = &self.source.cells;
        let d = &self.target.cells;
        let alpha = orientation((c[j].center - c[i].center).cross(c[k].center - c[i].center));
        let beta = orientation((d[zj].center - d[zi].center).cross(d[zk].center - d[zi].center));
        alpha * beta < 0
    }

    pub fn cost(&self, f: &[usize]) -> f64 {
        self.cost_terms(f).weighted(&self.weights)
    }

    /// Per-cell likelihood argmax; ties go to the smaller kinetic penalty,
    /// then the smaller target index. Returns window slots.
    pub fn initial_assignment(&self) -> Vec<usize> {
        (0..self.n())
            .map(|i| {
                let (l, k) = (&self.lik[i], &self.kin[i]);
                (0..l.len())
                    .min_by(|&a, &b| l[b].total_cmp(&l[a]).then(k[a].total_cmp(&k[b])).then(a.cmp(&b)))
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Largest number of cliques touched by one single-site change.
    pub fn max_touched_cliques(&self) -> usize {
        (0..self.n()).map(|j| self.bm.touched_cliques(j)).max().unwrap_or(0)
    }

    /// Decodes target indices into a `(source id, target id)` list.
    pub fn decode(&self, f: &[usize]) -> Vec<(CellId, CellId)> {
        self.source
            .cells
            .iter()
            .zip(f)
            .map(|(b, &t)| (b.id.clone(), self.target.cells[t].id.clone()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Target index per source cell.
    pub assignment: Vec<usize>,
    pub energy: f64,
    pub initial_energy: f64,
    pub energy_trace: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub epochs: usize,
}

/// Anneals the registration energy from the likelihood-argmax start.
pub fn register(
    problem: &RegistrationProblem,
    dynamics: Dynamics,
    schedule: &Schedule,
    seed: u64,
) -> Result<RegistrationResult> {
    if matches!(dynamics, Dynamics::Swap) {
        return Err(TrackError::InvalidConfig("registration needs async or sync dynamics".into()));
    }
    let init = problem.initial_assignment();
    let initial_energy = problem.bm.energy(&init);
    let result = anneal(&problem.bm, init, dynamics, schedule, seed)?;
    let assignment = problem.map(&result.best.states);
    Ok(RegistrationResult {
        assignment,
        energy: result.best.cached_energy,
        initial_energy,
        energy_trace: result.trace.iter().map(|r| r.energy).collect(),
        trace: result.trace,
        epochs: result.epochs,
    })
}
