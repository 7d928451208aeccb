//! Agent-based generator of growing rod-shaped colonies with exact lineage.
//!
//! Each interframe is integrated in fixed sub-steps. Per sub-step, cells
//! grow along their axis, divide on reaching their division length, move
//! under a persistent random velocity plus an optional colony swirl, and are
//! then separated by pairwise capsule pushes. Cell ids are reshuffled in
//! every emitted frame so they carry no tracking information.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};
use crate::geometry::{segment_closest_points, Cell, CellId, Frame, Rect, Vec2};
use crate::lineage::{LineageEntry, LineageRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialPhase {
    /// Every seeded cell starts at the birth length.
    Newborn,
    /// Seeded lengths are spread over one cell cycle.
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Length multiplier per minute.
    pub growth_rate: f64,
    /// Standard deviation of the log growth noise per √minute.
    pub growth_jitter: f64,
    pub interframe_minutes: f64,
    pub substep_minutes: f64,
    pub trap_bounds: Rect,
    pub split_ratio_range: (f64, f64),
    /// Offset range of the division length `2·L0 + ε`, in pixels.
    pub division_eps_range: (f64, f64),
    pub seed: u64,
    pub n_frames: usize,
    pub initial_cells: usize,
    pub initial_phase: InitialPhase,
    /// Radius around the trap center where seeded cells are placed.
    pub initial_spread: f64,
    /// Birth length `L0` (axis length, pixels).
    pub birth_length: f64,
    pub cell_width: f64,
    pub divisions_enabled: bool,
    /// Grow the colony with divisions until it has this many cells before
    /// the first frame is emitted.
    pub warmup_cells: usize,
    pub warmup_growth_rate: f64,
    /// Stationary speed scale of the random velocity, px/min.
    pub motility: f64,
    /// Velocity persistence time, minutes.
    pub motility_tau: f64,
    /// Rigid colony rotation about the trap center, rad/min.
    pub swirl: f64,
    /// Orientation noise, rad/√min.
    pub rotation_jitter: f64,
    /// Per-interframe bound on center displacement (children: on the
    /// displacement of their midpoint). `None` disables the clamp.
    pub max_motion: Option<f64>,
    /// Largest capsule interpenetration allowed in emitted frames.
    pub overlap_tolerance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            growth_rate: 1.05,
            growth_jitter: 0.01,
            interframe_minutes: 1.0,
            substep_minutes: 0.2,
            trap_bounds: Rect::from_size(600.0, 600.0),
            split_ratio_range: (0.45, 0.55),
            division_eps_range: (-1.0, 1.0),
            seed: 0,
            n_frames: 50,
            initial_cells: 1,
            initial_phase: InitialPhase::Uniform,
            initial_spread: 60.0,
            birth_length: 20.0,
            cell_width: 8.0,
            divisions_enabled: true,
            warmup_cells: 0,
            warmup_growth_rate: 1.05,
            motility: 0.5,
            motility_tau: 5.0,
            swirl: 0.0,
            rotation_jitter: 0.02,
            max_motion: Some(22.5),
            overlap_tolerance: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrackError::InvalidConfig(m.to_owned()));
        if !(self.growth_rate > 1.0 && self.growth_rate.is_finite()) {
            return bad("growth_rate must exceed 1");
        }
        if !(self.warmup_growth_rate > 1.0 && self.warmup_growth_rate.is_finite()) {
            return bad("warmup_growth_rate must exceed 1");
        }
        let (lo, hi) = self.split_ratio_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi && ((lo + hi) - 1.0).abs() < 1e-9) {
            return bad("split_ratio_range must lie in (0, 1) and be symmetric about 0.5");
        }
        let (elo, ehi) = self.division_eps_range;
        if !(elo <= ehi && 2.0 * self.birth_length + elo > self.birth_length) {
            return bad("division_eps_range must be ordered and keep L_div above L0");
        }
        if !(self.interframe_minutes > 0.0 && self.substep_minutes > 0.0) {
            return bad("time steps must be positive");
        }
        if !(self.birth_length > 0.0 && self.cell_width > 0.0) {
            return bad("cell dimensions must be positive");
        }
        if self.n_frames == 0 || self.initial_cells == 0 {
            return bad("n_frames and initial_cells must be positive");
        }
        if self.trap_bounds.width() <= 2.0 * self.cell_width || self.trap_bounds.height() <= 2.0 * self.cell_width {
            return bad("trap too small");
        }
        if self.motility < 0.0 || self.motility_tau <= 0.0 || self.rotation_jitter < 0.0 || self.growth_jitter < 0.0 {
            return bad("noise scales must be non-negative");
        }
        if let Some(m) = self.max_motion {
            if m <= 0.0 {
                return bad("max_motion must be positive");
            }
        }
        Ok(())
    }
}

/// One division: the parent's length at division and its children's
/// lengths at birth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionEvent {
    /// Index of the frame the parent was last seen in.
    pub frame_index: usize,
    pub parent_length: f64,
    pub children_lengths: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub frames: Vec<Frame>,
    /// `lineage[k]` maps frame `k` to frame `k + 1`.
    pub lineage: Vec<LineageRecord>,
    pub events: Vec<DivisionEvent>,
    /// Set when overlap could not be resolved and the run stopped early.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
struct Agent {
    uid: u64,
    center: Vec2,
    angle: f64,
    length: f64,
    width: f64,
    l_div: f64,
    velocity: Vec2,
    /// Displacement reference for the motion clamp.
    anchor: Vec2,
    born_this_interframe: bool,
}

impl Agent {
    fn dir(&self) -> Vec2 {
        Vec2::new(self.angle.cos(), self.angle.sin())
    }

    fn endpoints(&self) -> (Vec2, Vec2) {
        let half = self.dir() * (0.5 * self.length);
        (self.center - half, self.center + half)
    }
}

struct World<'a> {
    cfg: &'a SimConfig,
    rng: ChaCha8Rng,
    agents: Vec<Agent>,
    next_uid: u64,
    growth_rate: f64,
    divisions: bool,
    /// `(parent uid, child uid, child uid)` during the current interframe.
    pending: Vec<(u64, u64, u64)>,
    events: Vec<DivisionEvent>,
    frame_index: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl<'a> World<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self> {
        let mut world = World {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            agents: Vec::new(),
            next_uid: 0,
            growth_rate: cfg.growth_rate,
            divisions: cfg.divisions_enabled,
            pending: Vec::new(),
            events: Vec::new(),
            frame_index: 0,
        };
        world.seed_cells()?;
        Ok(world)
    }

    fn draw_l_div(&mut self) -> f64 {
        let (lo, hi) = self.cfg.division_eps_range;
        let eps = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        2.0 * self.cfg.birth_length + eps
    }

    fn new_agent(&mut self, center: Vec2, angle: f64, length: f64) -> Agent {
        let uid = self.next_uid;
        self.next_uid += 1;
        let l_div = self.draw_l_div();
        Agent {
            uid,
            center,
            angle,
            length,
            width: self.cfg.cell_width,
            l_div,
            velocity: Vec2::ZERO,
            anchor: center,
            born_this_interframe: false,
        }
    }

    fn seed_cells(&mut self) -> Result<()> {
        let center = self.cfg.trap_bounds.center();
        let l0 = self.cfg.birth_length;
        for k in 0..self.cfg.initial_cells {
            let length = match self.cfg.initial_phase {
                InitialPhase::Newborn => l0,
                InitialPhase::Uniform => l0 * 2f64.powf(self.rng.random_range(0.0..0.9)),
            };
            let mut placed = false;
            for _ in 0..1000 {
                let pos = if k == 0 && self.cfg.initial_cells == 1 {
                    center
                } else {
                    let r = self.cfg.initial_spread * self.rng.random::<f64>().sqrt();
                    let phi = self.rng.random_range(0.0..std::f64::consts::TAU);
                    center + Vec2::new(r * phi.cos(), r * phi.sin())
                };
                let angle = self.rng.random_range(0.0..std::f64::consts::PI);
                let agent = self.new_agent(pos, angle, length);
                let (e, h) = agent.endpoints();
                let clear = self.agents.iter().all(|o| {
                    let (oe, oh) = o.endpoints();
                    let (p, q) = segment_closest_points(e, h, oe, oh);
                    p.distance(q) >= 0.5 * (agent.width + o.width) + 1.0
                });
                if clear && self.inside(&agent) {
                    self.agents.push(agent);
                    placed = true;
                    break;
                }
                self.next_uid -= 1;
            }
            if !placed {
                return Err(TrackError::InvalidConfig(format!(
                    "could not place {} initial cells within spread {}",
                    self.cfg.initial_cells, self.cfg.initial_spread
                )));
            }
        }
        Ok(())
    }

    fn inside(&self, a: &Agent) -> bool {
        let (e, h) = a.endpoints();
        let r = 0.5 * a.width;
        let b = &self.cfg.trap_bounds;
        e.x.min(h.x) - r >= b.min.x && e.x.max(h.x) + r <= b.max.x && e.y.min(h.y) - r >= b.min.y && e.y.max(h.y) + r <= b.max.y
    }

    fn grow_and_divide(&mut self, dt: f64) {
        let log_g = self.growth_rate.ln();
        let jitter = self.cfg.growth_jitter * dt.sqrt();
        let (slo, shi) = self.cfg.split_ratio_range;
        let mut born = Vec::new();
        let mut i = 0;
        while i < self.agents.len() {
            let noise = if jitter > 0.0 { jitter * normal(&mut self.rng) } else { 0.0 };
            let factor = (log_g * dt + noise).exp().max(1.0);
            let can_divide = self.divisions && !self.agents[i].born_this_interframe;
            let a = &mut self.agents[i];
            a.length *= factor;
            if can_divide && a.length >= a.l_div {
                a.length = a.l_div;
                let parent = self.agents.swap_remove(i);
                let ratio = if shi > slo { self.rng.random_range(slo..=shi) } else { slo };
                let l1 = ratio * parent.length;
                let l2 = parent.length - l1;
                let dir = parent.dir();
                // Children span the parent plus one width and a 1 px gap
                // between their capsule surfaces.
                let half_span = 0.5 * (parent.length + parent.width + 1.0);
                let c1 = parent.center + dir * (-half_span + 0.5 * l1);
                let c2 = parent.center + dir * (half_span - 0.5 * l2);
                let mid = c1.midpoint(c2);
                let mut kids = Vec::with_capacity(2);
                for (c, l) in [(c1, l1), (c2, l2)] {
                    let mut child = self.new_agent(c, parent.angle, l);
                    child.width = parent.width;
                    child.velocity = parent.velocity;
                    child.anchor = parent.anchor + (c - mid);
                    child.born_this_interframe = true;
                    kids.push(child);
                }
                self.events.push(DivisionEvent {
                    frame_index: self.frame_index,
                    parent_length: parent.length,
                    children_lengths: (l1, l2),
                });
                self.pending.push((parent.uid, kids[0].uid, kids[1].uid));
                born.extend(kids);
                continue;
            }
            i += 1;
        }
        self.agents.extend(born);
    }

    fn move_cells(&mut self, dt: f64) {
        let decay = (-dt / self.cfg.motility_tau).exp();
        let kick = self.cfg.motility * (1.0 - decay * decay).sqrt();
        let rot = self.cfg.rotation_jitter * dt.sqrt();
        let center = self.cfg.trap_bounds.center();
        let swirl = self.cfg.swirl * dt;
        for a in &mut self.agents {
            if kick > 0.0 {
                let xi = Vec2::new(normal(&mut self.rng), normal(&mut self.rng));
                a.velocity = a.velocity * decay + xi * kick;
            }
            a.center += a.velocity * dt;
            if swirl != 0.0 {
                a.center = center + (a.center - center).rotated(swirl);
                a.angle += swirl;
            }
            if rot > 0.0 {
                a.angle += rot * normal(&mut self.rng);
            }
        }
    }

    fn confine(&mut self) {
        let b = self.cfg.trap_bounds;
        let max_motion = self.cfg.max_motion;
        for a in &mut self.agents {
            if let Some(m) = max_motion {
                let d = a.center - a.anchor;
                let n = d.norm();
                if n > m {
                    a.center = a.anchor + d * (m / n);
                }
            }
            let (e, h) = a.endpoints();
            let r = 0.5 * a.width;
            let mut shift = Vec2::ZERO;
            let lo_x = e.x.min(h.x) - r;
            let hi_x = e.x.max(h.x) + r;
            let lo_y = e.y.min(h.y) - r;
            let hi_y = e.y.max(h.y) + r;
            if lo_x < b.min.x {
                shift.x = b.min.x - lo_x;
            } else if hi_x > b.max.x {
                shift.x = b.max.x - hi_x;
            }
            if lo_y < b.min.y {
                shift.y = b.min.y - lo_y;
            } else if hi_y > b.max.y {
                shift.y = b.max.y - hi_y;
            }
            a.center += shift;
        }
    }

    /// One Gauss-Seidel sweep of pairwise pushes. Returns the largest
    /// overlap seen before pushing.
    fn relax_sweep(&mut self) -> f64 {
        let n = self.agents.len();
        if n < 2 {
            return 0.0;
        }
        let bin = self
            .agents
            .iter()
            .map(|a| a.length + a.width)
            .fold(0.0, f64::max)
            + 1.0;
        let key = |p: Vec2| ((p.x / bin).floor() as i64, (p.y / bin).floor() as i64);
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, a) in self.agents.iter().enumerate() {
            grid.entry(key(a.center)).or_default().push(i);
        }
        let mut worst: f64 = 0.0;
        let mut neighbors = Vec::new();
        for i in 0..n {
            let (kx, ky) = key(self.agents[i].center);
            neighbors.clear();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(list) = grid.get(&(kx + dx, ky + dy)) {
                        neighbors.extend(list.iter().copied().filter(|&j| j > i));
                    }
                }
            }
            neighbors.sort_unstable();
            for &j in &neighbors {
                worst = worst.max(self.push_pair(i, j));
            }
        }
        worst
    }

    fn push_pair(&mut self, i: usize, j: usize) -> f64 {
        const SLACK: f64 = 1.05;
        const TURN: f64 = 0.5;
        let (a, b) = (&self.agents[i], &self.agents[j]);
        let reach = 0.5 * (a.length + b.length + a.width + b.width);
        if a.center.distance(b.center) > reach {
            return 0.0;
        }
        let (ae, ah) = a.endpoints();
        let (be, bh) = b.endpoints();
        let (pa, pb) = segment_closest_points(ae, ah, be, bh);
        let d = pa.distance(pb);
        let overlap = 0.5 * (a.width + b.width) - d;
        if overlap <= 0.0 {
            return 0.0;
        }
        let normal = (pb - pa).normalized().or_else(|| (b.center - a.center).normalized()).unwrap_or_else(|| a.dir().perp());
        let step = normal * (0.5 * overlap * SLACK);
        let ra = pa - a.center;
        let rb = pb - b.center;
        let ia = 0.25 * a.length * a.length + a.width * a.width;
        let ib = 0.25 * b.length * b.length + b.width * b.width;
        let turn_a = TURN * ra.cross(-step) / ia;
        let turn_b = TURN * rb.cross(step) / ib;
        let a = &mut self.agents[i];
        a.center -= step;
        a.angle += turn_a;
        let b = &mut self.agents[j];
        b.center += step;
        b.angle += turn_b;
        overlap
    }

    fn relax(&mut self, target: f64, max_sweeps: usize) -> f64 {
        let mut worst = f64::INFINITY;
        for _ in 0..max_sweeps {
            worst = self.relax_sweep();
            self.confine();
            if worst <= target {
                break;
            }
        }
        worst
    }

    fn max_overlap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.agents.len() {
            let (ae, ah) = self.agents[i].endpoints();
            for j in i + 1..self.agents.len() {
                let (a, b) = (&self.agents[i], &self.agents[j]);
                if a.center.distance(b.center) > 0.5 * (a.length + b.length + a.width + b.width) {
                    continue;
                }
                let (be, bh) = b.endpoints();
                let (p, q) = segment_closest_points(ae, ah, be, bh);
                worst = worst.max(0.5 * (a.width + b.width) - p.distance(q));
            }
        }
        worst
    }

    /// Integrates one interframe. Returns `false` when overlap could not be
    /// brought under tolerance.
    fn advance(&mut self, minutes: f64) -> bool {
        let steps = (minutes / self.cfg.substep_minutes).ceil().max(1.0) as usize;
        let dt = minutes / steps as f64;
        for a in &mut self.agents {
            a.anchor = a.center;
            a.born_this_interframe = false;
        }
        self.pending.clear();
        for _ in 0..steps {
            self.grow_and_divide(dt);
            self.move_cells(dt);
            self.confine();
            self.relax(0.1, 30);
        }
        let tol = self.cfg.overlap_tolerance;
        if self.max_overlap() > tol {
            self.relax(0.5 * tol, 2000);
        }
        self.max_overlap() <= tol
    }

    /// Emits the current state with freshly shuffled ids. Returns the frame
    /// and the uid → emitted id map.
    fn emit(&mut self, index: usize) -> Result<(Frame, HashMap<u64, CellId>)> {
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        order.shuffle(&mut self.rng);
        let mut ids = HashMap::with_capacity(order.len());
        let mut cells = Vec::with_capacity(order.len());
        for (pos, &k) in order.iter().enumerate() {
            let a = &self.agents[k];
            let (e, h) = a.endpoints();
            let id = CellId::from(pos);
            ids.insert(a.uid, id.clone());
            cells.push(Cell::new(id, a.center, e, h, a.width)?);
        }
        Ok((Frame::new(index, cells, self.cfg.trap_bounds)?, ids))
    }
}

/// Runs the simulation described by `config`.
pub fn simulate(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let mut world = World::new(config)?;

    if config.warmup_cells > world.agents.len() {
        world.growth_rate = config.warmup_growth_rate;
        world.divisions = true;
        let mut guard = 0;
        while world.agents.len() < config.warmup_cells {
            if !world.advance(1.0) {
                return Err(TrackError::Infeasible("trap overfull during warm-up".into()));
            }
            guard += 1;
            if guard > 100_000 {
                return Err(TrackError::Infeasible("warm-up did not reach the target size".into()));
            }
        }
        world.growth_rate = config.growth_rate;
        world.divisions = config.divisions_enabled;
        for a in &mut world.agents {
            a.velocity = Vec2::ZERO;
        }
    }
    world.events.clear();

    let (first, mut ids) = world.emit(0)?;
    let mut frames = vec![first];
    let mut lineage = Vec::new();
    let mut truncated = false;
    for k in 1..config.n_frames {
        world.frame_index = k - 1;
        let uids_before: Vec<u64> = world.agents.iter().map(|a| a.uid).collect();
        if !world.advance(config.interframe_minutes) {
            log::warn!("simulation truncated at frame {k}: overlap not resolved");
            truncated = true;
            break;
        }
        let (frame, next_ids) = world.emit(k)?;
        let mut divided: HashMap<u64, (u64, u64)> = HashMap::new();
        for &(p, c1, c2) in &world.pending {
            divided.insert(p, (c1, c2));
        }
        let mut entries = Vec::with_capacity(uids_before.len());
        for uid in uids_before {
            let source = ids[&uid].clone();
            match divided.get(&uid) {
                Some(&(c1, c2)) => entries.push(LineageEntry::Divided {
                    source,
                    children: (next_ids[&c1].clone(), next_ids[&c2].clone()),
                }),
                None => entries.push(LineageEntry::Moved { source, target: next_ids[&uid].clone() }),
            }
        }
        let mut record = LineageRecord::new(k - 1, entries);
        record.entries.sort_by(|a, b| {
            a.source().0.parse::<usize>().unwrap_or(0).cmp(&b.source().0.parse::<usize>().unwrap_or(0))
        });
        lineage.push(record);
        frames.push(frame);
        ids = next_ids;
    }
    Ok(Simulation { frames, lineage, events: world.events, truncated })
}

/// Largest per-interframe displacement: target center for moves, children
/// midpoint for divisions.
pub fn true_motion_bound(frames: &[Frame], lineage: &[LineageRecord]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for record in lineage {
        let k = record.frame_index;
        let (cur, next) = match (frames.get(k), frames.get(k + 1)) {
            (Some(c), Some(n)) => (c, n),
            _ => return Err(TrackError::Mismatch(format!("record {k} has no frame pair"))),
        };
        let center_of = |f: &Frame, id: &CellId| {
            f.position(id).map(|i| f.cells[i].center).ok_or_else(|| TrackError::Mismatch(format!("unknown id {id}")))
        };
        for entry in &record.entries {
            let c = center_of(cur, entry.source())?;
            let d = match entry {
                LineageEntry::Moved { target, .. } => center_of(next, target)?.distance(c),
                LineageEntry::Divided { children, .. } => {
                    center_of(next, &children.0)?.midpoint(center_of(next, &children.1)?).distance(c)
                }
            };
            worst = worst.max(d);
        }
    }
    Ok(worst)
}
