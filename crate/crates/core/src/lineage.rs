//! Frame-to-frame mappings: each source cell either moves to one target or
//! divides into two.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrackError};
use crate::geometry::{CellId, Frame};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineageEntry {
    Moved { source: CellId, target: CellId },
    Divided { source: CellId, children: (CellId, CellId) },
}

impl LineageEntry {
    pub fn source(&self) -> &CellId {
        match self {
            LineageEntry::Moved { source, .. } | LineageEntry::Divided { source, .. } => source,
        }
    }

    pub fn targets(&self) -> Vec<&CellId> {
        match self {
            LineageEntry::Moved { target, .. } => vec![target],
            LineageEntry::Divided { children, .. } => vec![&children.0, &children.1],
        }
    }

    pub fn is_division(&self) -> bool {
        matches!(self, LineageEntry::Divided { .. })
    }

    /// Same entry with the children pair in canonical (sorted) order.
    pub fn canonical(&self) -> LineageEntry {
        match self {
            LineageEntry::Divided { source, children: (a, b) } if b < a => LineageEntry::Divided {
                source: source.clone(),
                children: (b.clone(), a.clone()),
            },
            other => other.clone(),
        }
    }
}

/// Mapping between frame `frame_index` and frame `frame_index + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub frame_index: usize,
    pub entries: Vec<LineageEntry>,
}

impl LineageRecord {
    pub fn new(frame_index: usize, entries: Vec<LineageEntry>) -> Self {
        LineageRecord { frame_index, entries }
    }

    pub fn division_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_division()).count()
    }

    pub fn divisions(&self) -> impl Iterator<Item = &LineageEntry> {
        self.entries.iter().filter(|e| e.is_division())
    }

    pub fn by_source(&self) -> HashMap<&CellId, &LineageEntry> {
        self.entries.iter().map(|e| (e.source(), e)).collect()
    }

    /// Sorted by source id with canonical children order.
    pub fn normalized(&self) -> LineageRecord {
        let mut entries: Vec<_> = self.entries.iter().map(LineageEntry::canonical).collect();
        entries.sort_by(|a, b| a.source().cmp(b.source()));
        LineageRecord { frame_index: self.frame_index, entries }
    }

    /// Checks the record is a total mapping from `frame` onto `next`: every
    /// source appears once, every target once, and the division count equals
    /// the cell-count increase.
    pub fn validate(&self, frame: &Frame, next: &Frame) -> Result<()> {
        let bad = |reason: String| TrackError::InvalidFrame { frame: self.frame_index, reason };
        let sources: HashSet<&CellId> = frame.cells.iter().map(|c| &c.id).collect();
        let targets: HashSet<&CellId> = next.cells.iter().map(|c| &c.id).collect();
        let mut seen_src = HashSet::new();
        let mut seen_tgt = HashSet::new();
        for entry in &self.entries {
            let s = entry.source();
            if !sources.contains(s) {
                return Err(bad(format!("unknown source {s}")));
            }
            if !seen_src.insert(s) {
                return Err(bad(format!("source {s} mapped twice")));
            }
            for t in entry.targets() {
                if !targets.contains(t) {
                    return Err(bad(format!("unknown target {t}")));
                }
                if !seen_tgt.insert(t) {
                    return Err(bad(format!("target {t} reached twice")));
                }
            }
        }
        if seen_src.len() != sources.len() {
            return Err(bad(format!("{} of {} sources unmapped", sources.len() - seen_src.len(), sources.len())));
        }
        if seen_tgt.len() != targets.len() {
            return Err(bad(format!("{} of {} targets unreached", targets.len() - seen_tgt.len(), targets.len())));
        }
        if next.len() < frame.len() || self.division_count() != next.len() - frame.len() {
            return Err(bad("division count does not match cell-count increase".into()));
        }
        Ok(())
    }
}

/// For every cell of the last frame, the index of its root ancestor in frame 0,
/// following the records backwards. Errors when a chain breaks.
pub fn root_ancestors(frames: &[Frame], records: &[LineageRecord]) -> Result<Vec<Vec<usize>>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    if records.len() + 1 != frames.len() {
        return Err(TrackError::Mismatch(format!(
            "{} frames but {} lineage records",
            frames.len(),
            records.len()
        )));
    }
    let mut roots: Vec<Vec<usize>> = vec![(0..frames[0].len()).collect()];
    for (k, record) in records.iter().enumerate() {
        let (cur, next) = (&frames[k], &frames[k + 1]);
        let cur_index: HashMap<&CellId, usize> = cur.cells.iter().enumerate().map(|(i, c)| (&c.id, i)).collect();
        let next_index: HashMap<&CellId, usize> = next.cells.iter().enumerate().map(|(i, c)| (&c.id, i)).collect();
        let mut out = vec![usize::MAX; next.len()];
        for entry in &record.entries {
            let src = *cur_index
                .get(entry.source())
                .ok_or_else(|| TrackError::Mismatch(format!("unknown source {}", entry.source())))?;
            for t in entry.targets() {
                let ti = *next_index
                    .get(t)
                    .ok_or_else(|| TrackError::Mismatch(format!("unknown target {t}")))?;
                out[ti] = roots[k][src];
            }
        }
        if out.contains(&usize::MAX) {
            return Err(TrackError::Mismatch(format!("frame {} has orphan cells", k + 1)));
        }
        roots.push(out);
    }
    Ok(roots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Cell, Rect, Vec2};

    fn frame(index: usize, ids: &[&str]) -> Frame {
        let cells = ids
            .iter()
            .enumerate()
            .map(|(i, id)| Cell::capsule(*id, Vec2::new(10.0 + 20.0 * i as f64, 10.0), 0.0, 8.0, 3.0).unwrap())
            .collect();
        Frame::new(index, cells, Rect::from_size(500.0, 500.0)).unwrap()
    }

    fn moved(s: &str, t: &str) -> LineageEntry {
        LineageEntry::Moved { source: s.into(), target: t.into() }
    }

    #[test]
    fn valid_record_passes() {
        let a = frame(0, &["a", "b"]);
        let b = frame(1, &["x", "y", "z"]);
        let rec = LineageRecord::new(
            0,
            vec![moved("a", "x"), LineageEntry::Divided { source: "b".into(), children: ("z".into(), "y".into()) }],
        );
        rec.validate(&a, &b).unwrap();
        assert_eq!(rec.division_count(), 1);
        let norm = rec.normalized();
        assert_eq!(norm.entries[1], LineageEntry::Divided { source: "b".into(), children: ("y".into(), "z".into()) });
    }

    #[test]
    fn duplicate_target_rejected() {
        let a = frame(0, &["a", "b"]);
        let b = frame(1, &["x", "y"]);
        let rec = LineageRecord::new(0, vec![moved("a", "x"), moved("b", "x")]);
        assert!(rec.validate(&a, &b).is_err());
    }

    #[test]
    fn missing_source_rejected() {
        let a = frame(0, &["a", "b"]);
        let b = frame(1, &["x", "y"]);
        assert!(LineageRecord::new(0, vec![moved("a", "x")]).validate(&a, &b).is_err());
    }

    #[test]
    fn ancestors_follow_divisions() {
        let frames = vec![frame(0, &["a", "b"]), frame(1, &["x", "y", "z"])];
        let rec = LineageRecord::new(
            0,
            vec![moved("a", "y"), LineageEntry::Divided { source: "b".into(), children: ("x".into(), "z".into()) }],
        );
        let roots = root_ancestors(&frames, &[rec]).unwrap();
        assert_eq!(roots[1], vec![1, 0, 1]);
    }
}
