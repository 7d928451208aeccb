//! Checks of the geometric and division stages against simulator ground truth.

use std::collections::{BTreeSet, HashSet};

use colony_track::division::{build_pch, estimate_parent, Penalties, TrimMode, TrimThresholds};
use colony_track::geometry::target_window;
use colony_track::pipeline::{ground_truth_reduction, track_pair, PipelineConfig};
use colony_track::{simulate, CellId, Frame, LineageEntry, LineageRecord, SimConfig, Simulation};

fn sim(seed: u64, n_frames: usize, warmup_cells: usize) -> Simulation {
    simulate(&SimConfig { seed, n_frames, warmup_cells, ..SimConfig::default() }).unwrap()
}

fn true_pairs(record: &LineageRecord, frame: &Frame, next: &Frame) -> Vec<(usize, (usize, usize))> {
    record
        .divisions()
        .filter_map(|e| match e {
            LineageEntry::Divided { source, children } => {
                let (a, b) = (next.position(&children.0)?, next.position(&children.1)?);
                Some((frame.position(source)?, (a.min(b), a.max(b))))
            }
            LineageEntry::Moved { .. } => None,
        })
        .collect()
}

#[test]
fn window_holds_true_successor() {
    for seed in 1..=3 {
        let s = sim(seed, 30, 20);
        for r in &s.lineage {
            let (a, b) = (&s.frames[r.frame_index], &s.frames[r.frame_index + 1]);
            for e in &r.entries {
                if let LineageEntry::Moved { source, target } = e {
                    let cell = &a.cells[a.position(source).unwrap()];
                    let t = b.position(target).unwrap();
                    assert!(target_window(cell, b, 100.0).contains(&t), "seed {seed} frame {}: {source}", r.frame_index);
                }
            }
        }
    }
}

#[test]
fn parent_estimate_matches_truth() {
    let weights = PipelineConfig::default().division_weights;
    let (mut hits, mut total) = (0, 0);
    for seed in 1..=4 {
        let s = sim(seed, 40, 10);
        for r in &s.lineage {
            let (a, b) = (&s.frames[r.frame_index], &s.frames[r.frame_index + 1]);
            for (parent, (c1, c2)) in true_pairs(r, a, b) {
                total += 1;
                let est = estimate_parent(&b.cells[c1], &b.cells[c2], a, 45.0, &weights);
                hits += (est.map(|(p, _)| p) == Some(parent)) as usize;
            }
        }
    }
    assert!(total >= 50, "only {total} divisions simulated");
    let frac = hits as f64 / total as f64;
    assert!(frac >= 0.95, "parent estimated for {hits}/{total}");
}

/// Penalties of the true and the invalid candidates over a batch of runs.
fn candidate_batch(seeds: std::ops::RangeInclusive<u64>) -> (Vec<Penalties>, Vec<Penalties>) {
    let cfg = PipelineConfig::default();
    let (mut good, mut bad) = (Vec::new(), Vec::new());
    for seed in seeds {
        let s = sim(seed, 30, 20);
        for r in &s.lineage {
            if r.division_count() == 0 {
                continue;
            }
            let (a, b) = (&s.frames[r.frame_index], &s.frames[r.frame_index + 1]);
            let truth: HashSet<(usize, usize)> = true_pairs(r, a, b).into_iter().map(|(_, p)| p).collect();
            for c in build_pch(a, b, cfg.tau, cfg.w, &cfg.division_weights) {
                if !c.is_feasible() {
                    continue;
                }
                if truth.contains(&c.pair) {
                    good.push(c.penalties);
                } else {
                    bad.push(c.penalties);
                }
            }
        }
    }
    (good, bad)
}

#[test]
fn quantile_trim_removes_invalid_pairs() {
    let (calibration, _) = candidate_batch(1..=3);
    let (good, bad) = candidate_batch(11..=13);
    assert!(!calibration.is_empty() && !good.is_empty() && !bad.is_empty());
    let t = TrimThresholds::from_true_pairs(&calibration, 1.0, 0.25, TrimMode::AnyExceed);
    let kept_good = good.iter().filter(|p| t.keeps(p)).count();
    let removed_bad = bad.iter().filter(|p| !t.keeps(p)).count();
    assert_eq!(kept_good, good.len(), "true pairs dropped");
    let frac = removed_bad as f64 / bad.len() as f64;
    assert!(frac >= 0.90, "removed {removed_bad}/{} invalid pairs", bad.len());
}

#[test]
fn reduction_excludes_true_triplets() {
    let cfg = PipelineConfig::default();
    let mut exact_pairs = 0;
    for seed in 1..=2 {
        let s = sim(seed, 30, 20);
        for r in &s.lineage {
            if r.division_count() == 0 {
                continue;
            }
            let (a, b) = (&s.frames[r.frame_index], &s.frames[r.frame_index + 1]);
            let (red, f) = ground_truth_reduction(a, b, r).unwrap();
            let parents: HashSet<&CellId> = r.divisions().map(|e| e.source()).collect();
            let children: HashSet<&CellId> = r.divisions().flat_map(|e| e.targets()).collect();
            let ids = |fr: &Frame| fr.cells.iter().map(|c| c.id.clone()).collect::<BTreeSet<_>>();
            let want_src: BTreeSet<CellId> = ids(a).into_iter().filter(|i| !parents.contains(i)).collect();
            let want_dst: BTreeSet<CellId> = ids(b).into_iter().filter(|i| !children.contains(i)).collect();
            assert_eq!(ids(&red.source), want_src);
            assert_eq!(ids(&red.target), want_dst);
            assert_eq!(f.iter().collect::<HashSet<_>>().len(), red.target.len());

            // When the detected triplets are the true ones, the registered
            // sources are exactly the reduced source set.
            let (rec, _) = track_pair(a, b, &cfg).unwrap();
            let found: HashSet<LineageEntry> = rec.divisions().map(|e| e.canonical()).collect();
            let truth: HashSet<LineageEntry> = r.divisions().map(|e| e.canonical()).collect();
            if found == truth {
                exact_pairs += 1;
                let moved: BTreeSet<CellId> =
                    rec.entries.iter().filter(|e| !e.is_division()).map(|e| e.source().clone()).collect();
                assert_eq!(moved, want_src);
            }
        }
    }
    assert!(exact_pairs > 0);
}
