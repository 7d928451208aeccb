//! Boltzmann-machine annealing over clique-factored energies.
//!
//! A [`CliqueProblem`] has `N` sites, each with a finite state set
//! `0..state_counts[j]`, and an energy `E(z) = Σ_K J_K(z)` where every clique
//! `K` touches one to three sites. Single-site energy changes only visit the
//! cliques that contain the site.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};

/// Energy table of one clique, indexed row-major by the states of its sites.
#[derive(Clone, Debug, PartialEq)]
pub enum CliqueTable {
    Dense(Vec<f64>),
    /// `weight` where the bit is set, zero elsewhere.
    Indicator { weight: f64, bits: Vec<u64> },
}

impl CliqueTable {
    /// Indicator table of `len` entries with the given set positions.
    pub fn indicator(weight: f64, len: usize, set: impl IntoIterator<Item = usize>) -> CliqueTable {
        let mut bits = vec![0u64; len.div_ceil(64)];
        for i in set {
            assert!(i < len, "indicator index {i} out of range {len}");
            bits[i >> 6] |= 1 << (i & 63);
        }
        CliqueTable::Indicator { weight, bits }
    }

    #[inline]
    fn value(&self, idx: usize) -> f64 {
        match self {
            CliqueTable::Dense(v) => v[idx],
            CliqueTable::Indicator { weight, bits } => {
                if bits[idx >> 6] >> (idx & 63) & 1 == 1 {
                    *weight
                } else {
                    0.0
                }
            }
        }
    }

    fn capacity(&self) -> usize {
        match self {
            CliqueTable::Dense(v) => v.len(),
            CliqueTable::Indicator { bits, .. } => bits.len() * 64,
        }
    }
}

#[derive(Clone, Debug)]
struct Clique {
    sites: [usize; 3],
    strides: [usize; 3],
    arity: usize,
    table: CliqueTable,
}

impl Clique {
    #[inline]
    fn index(&self, states: &[usize]) -> usize {
        let mut idx = 0;
        for p in 0..self.arity {
            idx += self.strides[p] * states[self.sites[p]];
        }
        idx
    }
}

/// Finite product configuration space with a clique-factored energy.
#[derive(Clone, Debug)]
pub struct CliqueProblem {
    state_counts: Vec<usize>,
    cliques: Vec<Clique>,
    /// For each site, `(clique, position of the site in the clique)`.
    site_cliques: Vec<Vec<(usize, usize)>>,
}

impl CliqueProblem {
    pub fn new(state_counts: Vec<usize>) -> Result<Self> {
        if let Some(j) = state_counts.iter().position(|&n| n == 0) {
            return Err(TrackError::InvalidConfig(format!("site {j} has an empty state set")));
        }
        let n = state_counts.len();
        Ok(CliqueProblem { state_counts, cliques: Vec::new(), site_cliques: vec![Vec::new(); n] })
    }

    /// Adds a clique over `sites` (one to three distinct sites). The table is
    /// indexed row-major, the last site varying fastest.
    pub fn add_clique(&mut self, sites: &[usize], table: CliqueTable) -> Result<usize> {
        let arity = sites.len();
        if !(1..=3).contains(&arity) {
            return Err(TrackError::InvalidConfig(format!("clique arity {arity} not in 1..=3")));
        }
        for (p, &s) in sites.iter().enumerate() {
            if s >= self.state_counts.len() {
                return Err(TrackError::InvalidConfig(format!("clique site {s} out of range")));
            }
            if sites[..p].contains(&s) {
                return Err(TrackError::InvalidConfig(format!("clique repeats site {s}")));
            }
        }
        let mut strides = [0usize; 3];
        let mut size = 1usize;
        for p in (0..arity).rev() {
            strides[p] = size;
            size *= self.state_counts[sites[p]];
        }
        match &table {
            CliqueTable::Dense(v) => {
                if v.len() != size {
                    return Err(TrackError::InvalidConfig(format!("table has {} entries, expected {size}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(TrackError::InvalidConfig("non-finite clique energy".into()));
                }
            }
            CliqueTable::Indicator { weight, .. } => {
                if table.capacity() < size {
                    return Err(TrackError::InvalidConfig(format!("indicator table shorter than {size}")));
                }
                if !weight.is_finite() {
                    return Err(TrackError::InvalidConfig("non-finite clique energy".into()));
                }
            }
        }
        let mut padded = [0usize; 3];
        padded[..arity].copy_from_slice(sites);
        let k = self.cliques.len();
        self.cliques.push(Clique { sites: padded, strides, arity, table });
        for (p, &s) in sites.iter().enumerate() {
            self.site_cliques[s].push((k, p));
        }
        Ok(k)
    }

    pub fn add_unary(&mut self, site: usize, values: Vec<f64>) -> Result<usize> {
        self.add_clique(&[site], CliqueTable::Dense(values))
    }

    pub fn n_sites(&self) -> usize {
        self.state_counts.len()
    }

    pub fn state_counts(&self) -> &[usize] {
        &self.state_counts
    }

    pub fn clique_count(&self) -> usize {
        self.cliques.len()
    }

    /// Number of cliques of arity 1, 2 and 3.
    pub fn clique_counts_by_arity(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for c in &self.cliques {
            out[c.arity - 1] += 1;
        }
        out
    }

    /// Number of cliques a single-site change at `site` touches.
    pub fn touched_cliques(&self, site: usize) -> usize {
        self.site_cliques[site].len()
    }

    pub fn clique_sites(&self, k: usize) -> &[usize] {
        let c = &self.cliques[k];
        &c.sites[..c.arity]
    }

    pub fn clique_energy(&self, k: usize, states: &[usize]) -> f64 {
        let c = &self.cliques[k];
        c.table.value(c.index(states))
    }

    pub fn check_states(&self, states: &[usize]) -> Result<()> {
        if states.len() != self.n_sites() {
            return Err(TrackError::InvalidConfig(format!(
                "configuration has {} sites, problem has {}",
                states.len(),
                self.n_sites()
            )));
        }
        if let Some(j) = (0..states.len()).find(|&j| states[j] >= self.state_counts[j]) {
            return Err(TrackError::InvalidConfig(format!("site {j} state out of range")));
        }
        Ok(())
    }

    /// Full energy recomputation.
    pub fn energy(&self, states: &[usize]) -> f64 {
        self.cliques.iter().map(|c| c.table.value(c.index(states))).sum()
    }

    /// `E(z with site := new) − E(z)`, visiting only the touched cliques.
    pub fn delta(&self, states: &[usize], site: usize, new: usize) -> f64 {
        let cur = states[site];
        if new == cur {
            return 0.0;
        }
        let mut d = 0.0;
        for &(k, p) in &self.site_cliques[site] {
            let c = &self.cliques[k];
            let idx = c.index(states);
            let step = c.strides[p];
            let moved = idx + step * new - step * cur;
            d += c.table.value(moved) - c.table.value(idx);
        }
        d
    }

    /// Fills `out[y] = E(z with site := y) − E(z)` for every state `y`.
    pub fn site_deltas(&self, states: &[usize], site: usize, out: &mut Vec<f64>) {
        let count = self.state_counts[site];
        let cur = states[site];
        out.clear();
        out.resize(count, 0.0);
        for &(k, p) in &self.site_cliques[site] {
            let c = &self.cliques[k];
            let step = c.strides[p];
            let base = c.index(states) - step * cur;
            let here = c.table.value(base + step * cur);
            for (y, slot) in out.iter_mut().enumerate() {
                *slot += c.table.value(base + step * y) - here;
            }
        }
        out[cur] = 0.0;
    }

    /// Energy change of setting `j := yj` then `k := yk`.
    pub fn pair_delta(&self, states: &mut [usize], j: usize, yj: usize, k: usize, yk: usize) -> f64 {
        let d1 = self.delta(states, j, yj);
        let old = states[j];
        states[j] = yj;
        let d2 = self.delta(states, k, yk);
        states[j] = old;
        d1 + d2
    }
}

/// A configuration with its cached energy.
#[derive(Clone, Debug, PartialEq)]
pub struct BmConfig {
    pub states: Vec<usize>,
    pub cached_energy: f64,
}

impl BmConfig {
    pub fn new(problem: &CliqueProblem, states: Vec<usize>) -> Result<Self> {
        problem.check_states(&states)?;
        let cached_energy = problem.energy(&states);
        Ok(BmConfig { states, cached_energy })
    }

    fn set(&mut self, site: usize, state: usize, delta: f64) {
        self.states[site] = state;
        self.cached_energy += delta;
    }
}

/// How the single-site updating procedure picks its candidate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Proposal {
    /// Lowest-Δ state other than the current one. Uphill moves are then
    /// possible and the temperature matters.
    #[default]
    BestAlternative,
    /// Lowest-Δ state over the whole set, the current state included. Since
    /// the current state has Δ = 0 this is a zero-temperature descent.
    BestIncludingCurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dynamics {
    Async,
    Sync { alpha: f64 },
    /// Exchange of one selected and one unselected site on a binary problem.
    Swap,
}

/// Geometric cooling `Temp(t) = c·η^t`, `t` counted in epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub c: f64,
    pub eta: f64,
    pub epoch_cap: usize,
    /// Steps without a relative energy change above `tolerance` before
    /// stopping. `None` uses the natural epoch length of the dynamics.
    pub stability_window: Option<usize>,
    pub tolerance: f64,
    pub proposal: Proposal,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::registration()
    }
}

impl Schedule {
    /// `50·0.995^t`, used for registration.
    pub fn registration() -> Self {
        Schedule {
            c: 50.0,
            eta: 0.995,
            epoch_cap: 2000,
            stability_window: None,
            tolerance: 1e-6,
            proposal: Proposal::BestAlternative,
        }
    }

    /// `1000·0.995^t` with a 5000-epoch cap, used for children pairing.
    pub fn children() -> Self {
        Schedule { c: 1000.0, eta: 0.995, epoch_cap: 5000, ..Schedule::registration() }
    }

    pub fn temperature(&self, epoch: usize) -> f64 {
        self.c * self.eta.powi(epoch.min(i32::MAX as usize) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(TrackError::InvalidConfig("schedule c must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(TrackError::InvalidConfig("schedule eta must lie in (0, 1)".into()));
        }
        if self.eta <= 0.99 {
            log::warn!("schedule eta = {} is below the recommended range (0.99, 1)", self.eta);
        }
        if self.epoch_cap == 0 {
            return Err(TrackError::InvalidConfig("epoch_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Probability of accepting a move with energy change `delta` at `temp`.
pub fn acceptance_probability(delta: f64, temp: f64) -> f64 {
    let d = delta.max(0.0);
    if d == 0.0 {
        1.0
    } else if temp <= 0.0 {
        0.0
    } else {
        (-d / temp).exp()
    }
}

#[inline]
fn accept<R: Rng>(rng: &mut R, delta: f64, temp: f64) -> bool {
    let d = delta.max(0.0);
    if d == 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < -d / temp
}

/// Lowest-Δ candidate per `proposal`; ties go to the lowest state index.
fn pick_candidate(deltas: &[f64], current: usize, proposal: Proposal) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (y, &d) in deltas.iter().enumerate() {
        if proposal == Proposal::BestAlternative && y == current {
            continue;
        }
        if !best.is_some_and(|b| d >= deltas[b]) {
            best = Some(y);
        }
    }
    best
}

/// Scratch space for the single-site updating procedure.
#[derive(Default)]
pub struct StepScratch {
    deltas: Vec<f64>,
    changes: Vec<(usize, usize)>,
}

/// One asynchronous update of `site`. Returns `true` when the state changed.
pub fn step_async<R: Rng>(
    config: &mut BmConfig,
    problem: &CliqueProblem,
    site: usize,
    temp: f64,
    proposal: Proposal,
    rng: &mut R,
    scratch: &mut StepScratch,
) -> bool {
    let cur = config.states[site];
    problem.site_deltas(&config.states, site, &mut scratch.deltas);
    let Some(z) = pick_candidate(&scratch.deltas, cur, proposal) else {
        return false;
    };
    if z == cur {
        return false;
    }
    let d = scratch.deltas[z];
    if accept(rng, d, temp) {
        config.set(site, z, d);
        true
    } else {
        false
    }
}

/// One synchronous step: every site is tagged with probability `alpha` and
/// tagged sites run the updating procedure against the frozen configuration.
/// Returns the number of changed sites.
pub fn step_sync<R: Rng>(
    config: &mut BmConfig,
    problem: &CliqueProblem,
    temp: f64,
    alpha: f64,
    proposal: Proposal,
    rng: &mut R,
    scratch: &mut StepScratch,
) -> usize {
    scratch.changes.clear();
    for site in 0..problem.n_sites() {
        if !rng.random_bool(alpha) {
            continue;
        }
        let cur = config.states[site];
        problem.site_deltas(&config.states, site, &mut scratch.deltas);
        let Some(z) = pick_candidate(&scratch.deltas, cur, proposal) else { continue };
        if z != cur && accept(rng, scratch.deltas[z], temp) {
            scratch.changes.push((site, z));
        }
    }
    // Commit after all decisions so each saw the time-t configuration.
    for &(site, z) in &scratch.changes {
        let d = problem.delta(&config.states, site, z);
        config.set(site, z, d);
    }
    scratch.changes.len()
}

/// Selected and unselected site lists of a binary configuration.
#[derive(Clone, Debug)]
pub struct SwapState {
    ones: Vec<usize>,
    zeros: Vec<usize>,
}

impl SwapState {
    pub fn new(states: &[usize]) -> Self {
        let (ones, zeros) = (0..states.len()).partition(|&j| states[j] == 1);
        SwapState { ones, zeros }
    }

    pub fn weight(&self) -> usize {
        self.ones.len()
    }
}

/// One swap proposal: a random selected site `j` and unselected site `k`
/// exchange states. Returns `true` when accepted.
pub fn step_swap<R: Rng>(
    config: &mut BmConfig,
    problem: &CliqueProblem,
    swap: &mut SwapState,
    temp: f64,
    rng: &mut R,
) -> bool {
    if swap.ones.is_empty() || swap.zeros.is_empty() {
        return false;
    }
    let a = rng.random_range(0..swap.ones.len());
    let b = rng.random_range(0..swap.zeros.len());
    let (j, k) = (swap.ones[a], swap.zeros[b]);
    let d = problem.pair_delta(&mut config.states, j, 0, k, 1);
    if accept(rng, d, temp) {
        config.states[j] = 0;
        config.states[k] = 1;
        config.cached_energy += d;
        swap.ones[a] = k;
        swap.zeros[b] = j;
        true
    } else {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub temperature: f64,
    pub energy: f64,
    pub accepted: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealResult {
    /// Lowest-energy configuration visited.
    pub best: BmConfig,
    /// Configuration at termination.
    pub last: BmConfig,
    pub trace: Vec<TraceRow>,
    pub epochs: usize,
    pub steps: usize,
    pub stopped_by_stability: bool,
}

struct Stability {
    reference: f64,
    quiet: usize,
    window: usize,
    tolerance: f64,
}

impl Stability {
    fn new(energy: f64, window: usize, tolerance: f64) -> Self {
        Stability { reference: energy, quiet: 0, window: window.max(1), tolerance }
    }

    /// Records one step; returns `true` once the energy has stayed put for
    /// a whole window.
    fn observe(&mut self, energy: f64) -> bool {
        let scale = self.reference.abs().max(energy.abs());
        if (energy - self.reference).abs() > self.tolerance * scale + 1e-12 {
            self.reference = energy;
            self.quiet = 0;
        } else {
            self.quiet += 1;
        }
        self.quiet >= self.window
    }
}

struct Best {
    states: Vec<usize>,
    energy: f64,
}

impl Best {
    fn offer(&mut self, config: &BmConfig) {
        if config.cached_energy < self.energy - 1e-12 {
            self.energy = config.cached_energy;
            self.states.clone_from(&config.states);
        }
    }
}

/// Anneals from `init` and returns the best visited configuration.
///
/// Epoch lengths: `N` single-site updates for async (one random permutation
/// of the sites), `⌈1/α⌉` steps for sync, `m` proposals for swap.
pub fn anneal(
    problem: &CliqueProblem,
    init: Vec<usize>,
    dynamics: Dynamics,
    schedule: &Schedule,
    seed: u64,
) -> Result<AnnealResult> {
    schedule.validate()?;
    let mut config = BmConfig::new(problem, init)?;
    let n = problem.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scratch = StepScratch::default();
    let mut best = Best { states: config.states.clone(), energy: config.cached_energy };
    let mut trace = Vec::new();
    let mut steps = 0usize;
    let mut epochs = 0usize;
    let mut stopped = false;

    let (epoch_len, natural_window) = match dynamics {
        Dynamics::Async => (n, n),
        Dynamics::Sync { alpha } => {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(TrackError::InvalidConfig(format!("synchrony alpha {alpha} not in (0, 1]")));
            }
            let len = (1.0 / alpha).ceil() as usize;
            (len, len)
        }
        Dynamics::Swap => {
            if problem.state_counts().iter().any(|&c| c != 2) {
                return Err(TrackError::InvalidConfig("swap dynamics need a binary problem".into()));
            }
            (n, n)
        }
    };
    let mut stability =
        Stability::new(config.cached_energy, schedule.stability_window.unwrap_or(natural_window), schedule.tolerance);
    let mut swap = SwapState::new(&config.states);
    let mut order: Vec<usize> = (0..n).collect();

    if n == 0 || epoch_len == 0 {
        return Ok(AnnealResult {
            best: config.clone(),
            last: config,
            trace,
            epochs: 0,
            steps: 0,
            stopped_by_stability: true,
        });
    }

    'outer: while epochs < schedule.epoch_cap {
        let temp = schedule.temperature(epochs);
        let mut accepted = 0usize;
        if dynamics == Dynamics::Async {
            order.shuffle(&mut rng);
        }
        for i in 0..epoch_len {
            let changed = match dynamics {
                Dynamics::Async => {
                    step_async(&mut config, problem, order[i], temp, schedule.proposal, &mut rng, &mut scratch) as usize
                }
                Dynamics::Sync { alpha } => {
                    step_sync(&mut config, problem, temp, alpha, schedule.proposal, &mut rng, &mut scratch)
                }
                Dynamics::Swap => step_swap(&mut config, problem, &mut swap, temp, &mut rng) as usize,
            };
            accepted += changed;
            steps += 1;
            if changed > 0 {
                best.offer(&config);
            }
            if stability.observe(config.cached_energy) {
                stopped = true;
                epochs += 1;
                trace.push(TraceRow { step: steps, temperature: temp, energy: config.cached_energy, accepted });
                break 'outer;
            }
        }
        epochs += 1;
        trace.push(TraceRow { step: steps, temperature: temp, energy: config.cached_energy, accepted });
    }

    // Drop accumulated rounding from the incremental bookkeeping.
    config.cached_energy = problem.energy(&config.states);
    let best_energy = problem.energy(&best.states);
    let best = if best_energy <= config.cached_energy {
        BmConfig { states: best.states, cached_energy: best_energy }
    } else {
        config.clone()
    };
    Ok(AnnealResult { best, last: config, trace, epochs, steps, stopped_by_stability: stopped })
}

/// Exhaustive minimum over the whole configuration space. Intended for
/// small problems and tests; the space size must fit in `u64`.
pub fn exhaustive_minimum(problem: &CliqueProblem) -> (Vec<usize>, f64) {
    let counts = problem.state_counts();
    let mut states = vec![0usize; counts.len()];
    let mut best = (states.clone(), problem.energy(&states));
    loop {
        let mut j = 0;
        loop {
            if j == counts.len() {
                return best;
            }
            states[j] += 1;
            if states[j] < counts[j] {
                break;
            }
            states[j] = 0;
            j += 1;
        }
        let e = problem.energy(&states);
        if e < best.1 {
            best = (states.clone(), e);
        }
    }
}
