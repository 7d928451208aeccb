//! Cost-weight estimation from a known mapping.
//!
//! For each single-point modification `f'_a` of a ground-truth mapping `f`,
//! `V_a = PEN(f'_a) − PEN(f)` is the change of the penalty vector. Weights
//! `Λ` should make every `⟨Λ, V_a⟩` non-negative. The slack-relaxed problem
//!
//! ```text
//! min  γ·Σ y(a) − Σ [⟨Λ, V_a⟩]⁺
//! s.t. ⟨Λ, V_a⟩ + y(a) ≥ 0,  Λ ⪰ 0,  y ⪰ 0,  ⟨Λ, 1⟩ ≤ budget
//! ```
//!
//! is solved by the convex-concave procedure: the concave term is replaced
//! by its supporting linearization at the current iterate and the linear
//! program is solved exactly, until the objective stalls.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};
use crate::registration::RegistrationProblem;

pub const DEFAULT_GAMMA: f64 = 1e10;
pub const DEFAULT_BUDGET: f64 = 1000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationMode {
    /// One alternative per source, drawn uniformly from its window.
    #[default]
    Sample,
    /// Every alternative of every source.
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    /// `⟨Λ, V_a⟩ + y(a) ≥ 0`.
    #[default]
    Inequality,
    /// `⟨Λ, V_a⟩ + y(a) = 0`, as literally stated; forces `⟨Λ, V_a⟩ ≤ 0`.
    Equality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInstance {
    pub penalty_dim: usize,
    pub vectors: Vec<Vec<f64>>,
    /// `(source, alternative target)` that produced each vector.
    pub moves: Vec<(usize, usize)>,
    pub gamma: f64,
    pub budget: f64,
    pub mode: ConstraintMode,
}

impl CalibrationInstance {
    pub fn new(penalty_dim: usize, vectors: Vec<Vec<f64>>) -> Self {
        let moves = (0..vectors.len()).map(|a| (a, 0)).collect();
        CalibrationInstance {
            penalty_dim,
            vectors,
            moves,
            gamma: DEFAULT_GAMMA,
            budget: DEFAULT_BUDGET,
            mode: ConstraintMode::Inequality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrackError::InvalidConfig(m));
        if self.penalty_dim == 0 {
            return bad("penalty dimension must be positive".into());
        }
        if self.vectors.is_empty() {
            return bad("calibration needs at least one perturbation".into());
        }
        if let Some(a) = self.vectors.iter().position(|v| v.len() != self.penalty_dim || v.iter().any(|x| !x.is_finite())) {
            return bad(format!("perturbation {a} is malformed or non-finite"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive".into());
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return bad("budget must be positive".into());
        }
        Ok(())
    }

    /// Optimal slack for `Λ`.
    pub fn slack(&self, lambda: &[f64]) -> Vec<f64> {
        self.vectors
            .iter()
            .map(|v| {
                let s = dot(lambda, v);
                match self.mode {
                    ConstraintMode::Inequality => (-s).max(0.0),
                    ConstraintMode::Equality => -s,
                }
            })
            .collect()
    }

    /// `true` when `Λ` satisfies the constraint system with its optimal slack.
    pub fn is_feasible(&self, lambda: &[f64], tol: f64) -> bool {
        lambda.len() == self.penalty_dim
            && lambda.iter().all(|&l| l >= -tol)
            && lambda.iter().sum::<f64>() <= self.budget * (1.0 + tol) + tol
            && self.slack(lambda).iter().all(|&y| y >= -tol)
    }

    /// `γ·Σ y − Σ [⟨Λ, V_a⟩]⁺` with the optimal slack.
    pub fn objective(&self, lambda: &[f64]) -> f64 {
        let slack: f64 = self.slack(lambda).iter().sum();
        let gain: f64 = self.vectors.iter().map(|v| dot(lambda, v).max(0.0)).sum();
        self.gamma * slack - gain
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds one perturbation per source (or per alternative in
/// [`PerturbationMode::All`]) of the mapping `f`, given as target indices.
/// Sources whose window holds nothing but `f(a)` are skipped.
pub fn build_perturbations<F>(
    f: &[usize],
    windows: &[Vec<usize>],
    penalties: F,
    mode: PerturbationMode,
    seed: u64,
) -> Result<CalibrationInstance>
where
    F: Fn(&[usize]) -> Vec<f64> + Sync,
{
    if f.len() != windows.len() {
        return Err(TrackError::Mismatch(format!("{} sources but {} windows", f.len(), windows.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moves = Vec::new();
    for (a, win) in windows.iter().enumerate() {
        let alts: Vec<usize> = win.iter().copied().filter(|&t| t != f[a]).collect();
        match mode {
            PerturbationMode::Sample => {
                if let Some(&s) = alts.choose(&mut rng) {
                    moves.push((a, s));
                }
            }
            PerturbationMode::All => moves.extend(alts.into_iter().map(|s| (a, s))),
        }
    }
    let base = penalties(f);
    let dim = base.len();
    let vectors: Vec<Vec<f64>> = moves
        .par_iter()
        .map(|&(a, s)| {
            let mut g = f.to_vec();
            g[a] = s;
            penalties(&g).iter().zip(&base).map(|(x, y)| x - y).collect()
        })
        .collect();
    let mut inst = CalibrationInstance::new(dim, vectors);
    inst.moves = moves;
    Ok(inst)
}

/// Perturbations of a registration problem's penalty vector
/// `[match, over, stab, flip]` around the mapping `f` (target indices).
pub fn registration_perturbations(
    problem: &RegistrationProblem,
    f: &[usize],
    mode: PerturbationMode,
    seed: u64,
) -> Result<CalibrationInstance> {
    build_perturbations(f, &problem.windows, |g| problem.cost_terms(g).as_array().to_vec(), mode, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub max_rounds: usize,
    pub tolerance: f64,
    /// Random restarts on the budget face in addition to the uniform start
    /// and the simplex vertices.
    pub extra_starts: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { max_rounds: 100, tolerance: 1e-6, extra_starts: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lambda: Vec<f64>,
    pub slack: Vec<f64>,
    pub objective: f64,
    /// Objective after each round of the winning start, beginning with the
    /// start itself.
    pub history: Vec<f64>,
    pub starts: usize,
}

/// Row of the calibration report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub a: usize,
    pub score: f64,
    pub slack: f64,
}

impl Calibration {
    pub fn report(&self, instance: &CalibrationInstance) -> Vec<ReportRow> {
        instance
            .vectors
            .iter()
            .zip(&self.slack)
            .enumerate()
            .map(|(a, (v, &y))| ReportRow { a, score: dot(&self.lambda, v), slack: y })
            .collect()
    }
}

/// Runs the convex-concave procedure from `Λ⁰ = (budget/m)·1`, from every
/// budget-scaled unit vector and from random points of the budget face,
/// and keeps the best local solution.
pub fn calibrate(instance: &CalibrationInstance, options: &CalibrationOptions) -> Result<Calibration> {
    instance.validate()?;
    let m = instance.penalty_dim;
    let b = instance.budget;
    let mut starts = vec![vec![b / m as f64; m]];
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = b;
        starts.push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.extra_starts {
        // Uniform on the face via normalized exponentials.
        let raw: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        starts.push(raw.iter().map(|r| b * r / total).collect());
    }
    // Internally the vectors are rescaled to unit max-norm; the minimizer in
    // Λ is unchanged and the LP stays well conditioned.
    let scale = instance.vectors.iter().flatten().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let scaled = if scale > 0.0 {
        CalibrationInstance {
            vectors: instance.vectors.iter().map(|v| v.iter().map(|x| x / scale).collect()).collect(),
            ..instance.clone()
        }
    } else {
        instance.clone()
    };
    let runs: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|s| ccp(&scaled, s.clone(), options))
        .collect::<Result<_>>()?;
    let (lambda, history) = runs
        .into_iter()
        .min_by(|x, y| instance.objective(&x.0).total_cmp(&instance.objective(&y.0)))
        .expect("at least one start");
    let history = if scale > 0.0 { history.iter().map(|h| h * scale).collect() } else { history };
    Ok(Calibration {
        slack: instance.slack(&lambda),
        objective: instance.objective(&lambda),
        lambda,
        history,
        starts: starts.len(),
    })
}

fn ccp(inst: &CalibrationInstance, start: Vec<f64>, options: &CalibrationOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut lambda = start;
    let mut value = inst.objective(&lambda);
    let mut history = vec![value];
    for _ in 0..options.max_rounds {
        let active: Vec<bool> = inst.vectors.iter().map(|v| dot(&lambda, v) > 0.0).collect();
        let next = solve_linearized(inst, &active)?;
        let next_value = inst.objective(&next);
        if next_value > value {
            // The linearization majorizes the objective, so this only
            // happens through round-off; keep the current iterate.
            break;
        }
        let improved = value - next_value;
        lambda = next;
        value = next_value;
        history.push(value);
        if improved <= options.tolerance * value.abs().max(1.0) {
            break;
        }
    }
    Ok((lambda, history))
}

/// Solves the linear program obtained by fixing the active set of the
/// concave term.
fn solve_linearized(inst: &CalibrationInstance, active: &[bool]) -> Result<Vec<f64>> {
    let m = inst.penalty_dim;
    let n = inst.vectors.len();
    let mut gain = vec![0.0; m];
    for (v, _) in inst.vectors.iter().zip(active).filter(|(_, &a)| a) {
        for (g, x) in gain.iter_mut().zip(v) {
            *g += x;
        }
    }
    let mut budget_row = vec![1.0; m];
    match inst.mode {
        ConstraintMode::Inequality => {
            // Variables [Λ, y]: maximize ⟨Λ, G⟩ − γ·Σy subject to
            // −⟨Λ, V_a⟩ − y(a) ≤ 0 and ⟨Λ, 1⟩ ≤ budget.
            let mut c = gain;
            c.extend(std::iter::repeat_n(-inst.gamma, n));
            let mut rows = Vec::with_capacity(n + 1);
            for (a, v) in inst.vectors.iter().enumerate() {
                let mut row: Vec<f64> = v.iter().map(|x| -x).collect();
                row.extend(std::iter::repeat_n(0.0, n));
                row[m + a] = -1.0;
                rows.push(row);
            }
            budget_row.extend(std::iter::repeat_n(0.0, n));
            rows.push(budget_row);
            let mut rhs = vec![0.0; n];
            rhs.push(inst.budget);
            let x = lp::maximize(&c, &rows, &rhs)?;
            Ok(x[..m].to_vec())
        }
        ConstraintMode::Equality => {
            // y(a) = −⟨Λ, V_a⟩ is eliminated: maximize ⟨Λ, G + γ·ΣV⟩
            // subject to ⟨Λ, V_a⟩ ≤ 0 and ⟨Λ, 1⟩ ≤ budget.
            let mut c = gain;
            for v in &inst.vectors {
                for (ci, x) in c.iter_mut().zip(v) {
                    *ci += inst.gamma * x;
                }
            }
            let mut rows: Vec<Vec<f64>> = inst.vectors.clone();
            rows.push(budget_row);
            let mut rhs = vec![0.0; n];
            rhs.push(inst.budget);
            lp::maximize(&c, &rows, &rhs)
        }
    }
}

mod lp {
    //! Dense tableau simplex for `max cᵀx` s.t. `Ax ≤ b`, `x ⪰ 0`, `b ⪰ 0`.
    //! The origin is a feasible basis, so no first phase is needed.

    use crate::error::{Result, TrackError};

    const EPS: f64 = 1e-9;
    /// Degenerate pivots tolerated before switching to Bland's rule.
    const DEGENERATE_LIMIT: usize = 50;

    pub fn maximize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
        let n = c.len();
        let rows = a.len();
        if b.iter().any(|&x| x < 0.0) || a.iter().any(|r| r.len() != n) {
            return Err(TrackError::InvalidConfig("LP needs a non-negative right-hand side".into()));
        }
        let width = n + rows + 1;
        // Row-major tableau; the last row holds the reduced costs.
        let mut t = vec![0.0; (rows + 1) * width];
        for (i, row) in a.iter().enumerate() {
            t[i * width..i * width + n].copy_from_slice(row);
            t[i * width + n + i] = 1.0;
            t[i * width + width - 1] = b[i];
        }
        for (j, &cj) in c.iter().enumerate() {
            t[rows * width + j] = -cj;
        }
        let mut basis: Vec<usize> = (n..n + rows).collect();
        let mut degenerate = 0;
        let max_iter = 50 * (n + rows) + 1000;
        for _ in 0..max_iter {
            let obj = &t[rows * width..rows * width + width - 1];
            let entering = if degenerate < DEGENERATE_LIMIT {
                let (j, v) = obj.iter().enumerate().fold((usize::MAX, -EPS), |acc, (j, &v)| if v < acc.1 { (j, v) } else { acc });
                (v < -EPS).then_some(j)
            } else {
                obj.iter().position(|&v| v < -EPS)
            };
            let Some(e) = entering else {
                let mut x = vec![0.0; n];
                for (i, &bv) in basis.iter().enumerate() {
                    if bv < n {
                        x[bv] = t[i * width + width - 1].max(0.0);
                    }
                }
                return Ok(x);
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..rows {
                let aij = t[i * width + e];
                if aij > EPS {
                    let ratio = t[i * width + width - 1] / aij;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((k, r)) if ratio < r - EPS || (ratio <= r + EPS && basis[i] < basis[k]) => Some((i, ratio)),
                        keep => keep,
                    };
                }
            }
            let Some((p, ratio)) = leave else {
                return Err(TrackError::Infeasible("linear program is unbounded".into()));
            };
            degenerate = if ratio.abs() <= EPS { degenerate + 1 } else { 0 };
            pivot(&mut t, width, rows, p, e);
            basis[p] = e;
        }
        Err(TrackError::Infeasible("simplex iteration limit reached".into()))
    }

    fn pivot(t: &mut [f64], width: usize, rows: usize, p: usize, e: usize) {
        let inv = 1.0 / t[p * width + e];
        for v in &mut t[p * width..(p + 1) * width] {
            *v *= inv;
        }
        let prow: Vec<f64> = t[p * width..(p + 1) * width].to_vec();
        for i in 0..=rows {
            if i == p {
                continue;
            }
            let f = t[i * width + e];
            if f != 0.0 {
                for (v, pv) in t[i * width..(i + 1) * width].iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
            }
        }
    }

}

/// Fraction of sources for which `f` is no worse than every single-point
/// alternative in their window, under `problem`'s current weights.
pub fn local_minimum_fraction(problem: &RegistrationProblem, f: &[usize]) -> f64 {
    let n = problem.n();
    if n == 0 {
        return 1.0;
    }
    let base = problem.cost(f);
    let ok = (0..n)
        .into_par_iter()
        .filter(|&a| {
            problem.windows[a].iter().filter(|&&t| t != f[a]).all(|&t| {
                let mut g = f.to_vec();
                g[a] = t;
                problem.cost(&g) >= base - 1e-12 * base.abs().max(1.0)
            })
        })
        .count();
    ok as f64 / n as f64
}
