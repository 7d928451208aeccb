//! File formats: JSON-lines frames, lineage and registration CSVs, trace and
//! report CSVs, TOML configuration files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annealer::{Dynamics, Schedule, TraceRow};
use crate::calibration::ReportRow;
use crate::division::{DivisionWeights, ScatterRow, TrimThresholds};
use crate::error::{Result, TrackError};
use crate::geometry::{Cell, CellId, Frame, Vec2};
use crate::lineage::{LineageEntry, LineageRecord};
use crate::registration::RegistrationWeights;

/// One line of a frame file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellLine {
    pub frame: usize,
    pub id: CellId,
    pub center: Vec2,
    pub e: Vec2,
    pub h: Vec2,
    pub width: f64,
}

pub fn parse_frames(reader: impl BufRead) -> Result<Vec<Frame>> {
    let mut by_frame: BTreeMap<usize, Vec<Cell>> = BTreeMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CellLine =
            serde_json::from_str(&line).map_err(|e| TrackError::Parse(format!("line {}: {e}", n + 1)))?;
        let cell = Cell::new(rec.id, rec.center, rec.e, rec.h, rec.width)
            .map_err(|e| TrackError::Parse(format!("line {}: {e}", n + 1)))?;
        by_frame.entry(rec.frame).or_default().push(cell);
    }
    by_frame.into_iter().map(|(k, cells)| Frame::with_fitted_bounds(k, cells)).collect()
}

pub fn read_frames(path: &Path) -> Result<Vec<Frame>> {
    parse_frames(BufReader::new(File::open(path)?))
}

pub fn write_frames(path: &Path, frames: &[Frame]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for f in frames {
        for c in &f.cells {
            let line = CellLine {
                frame: f.index,
                id: c.id.clone(),
                center: c.center,
                e: c.endpoints.0,
                h: c.endpoints.1,
                width: c.width,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LineageRow {
    frame_index: usize,
    source_id: String,
    kind: String,
    target_id_1: String,
    #[serde(default)]
    target_id_2: String,
}

pub fn write_lineage_csv(path: &Path, records: &[LineageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        for e in &r.entries {
            let row = match e {
                LineageEntry::Moved { source, target } => LineageRow {
                    frame_index: r.frame_index,
                    source_id: source.0.clone(),
                    kind: "MOVE".into(),
                    target_id_1: target.0.clone(),
                    target_id_2: String::new(),
                },
                LineageEntry::Divided { source, children } => LineageRow {
                    frame_index: r.frame_index,
                    source_id: source.0.clone(),
                    kind: "DIV".into(),
                    target_id_1: children.0 .0.clone(),
                    target_id_2: children.1 .0.clone(),
                },
            };
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_lineage_csv(path: &Path) -> Result<Vec<LineageRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut by_frame: BTreeMap<usize, Vec<LineageEntry>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: LineageRow = row?;
        let entry = match row.kind.as_str() {
            "MOVE" => LineageEntry::Moved { source: row.source_id.into(), target: row.target_id_1.into() },
            "DIV" => LineageEntry::Divided {
                source: row.source_id.into(),
                children: (row.target_id_1.into(), row.target_id_2.into()),
            },
            other => return Err(TrackError::Parse(format!("unknown lineage kind {other:?}"))),
        };
        by_frame.entry(row.frame_index).or_default().push(entry);
    }
    Ok(by_frame.into_iter().map(|(k, entries)| LineageRecord::new(k, entries)).collect())
}

#[derive(Serialize)]
struct RegistrationRow<'a> {
    frame_index: usize,
    source_id: &'a str,
    kind: &'a str,
    target_id: &'a str,
}

/// Registration moves only (division triplets live in the lineage CSV).
pub fn write_registration_csv(path: &Path, records: &[LineageRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        for e in &r.entries {
            if let LineageEntry::Moved { source, target } = e {
                w.serialize(RegistrationRow { frame_index: r.frame_index, source_id: &source.0, kind: "MOVE", target_id: &target.0 })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_calibration_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| TrackError::Parse(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| TrackError::Parse(e.to_string()))
}

/// Weight file consumed by tracking and produced by calibration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub registration: Option<RegistrationWeights>,
    pub division: Option<DivisionWeights>,
    pub trim: Option<TrimThresholds>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub c: Option<f64>,
    pub eta: Option<f64>,
    pub epoch_cap: Option<usize>,
    pub stability_window: Option<usize>,
    pub tolerance: Option<f64>,
}

impl ScheduleSection {
    pub fn apply(&self, base: &Schedule) -> Schedule {
        Schedule {
            c: self.c.unwrap_or(base.c),
            eta: self.eta.unwrap_or(base.eta),
            epoch_cap: self.epoch_cap.unwrap_or(base.epoch_cap),
            stability_window: self.stability_window.or(base.stability_window),
            tolerance: self.tolerance.unwrap_or(base.tolerance),
            proposal: base.proposal,
        }
    }
}

/// Schedule file: top-level keys tune registration, an optional
/// `[children]` table tunes pairing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleFile {
    #[serde(flatten)]
    pub registration: ScheduleSection,
    pub dynamics: Option<String>,
    pub alpha: Option<f64>,
    pub children: Option<ScheduleSection>,
}

impl ScheduleFile {
    /// Registration dynamics named in the file, if any.
    pub fn dynamics(&self) -> Result<Option<Dynamics>> {
        parse_dynamics(self.dynamics.as_deref(), self.alpha)
    }
}

/// `async`, `sync` (α defaults to 0.5) or `swap-auto` (async registration;
/// pairing always swaps).
pub fn parse_dynamics(name: Option<&str>, alpha: Option<f64>) -> Result<Option<Dynamics>> {
    match name {
        None => Ok(None),
        Some("async") | Some("swap-auto") => Ok(Some(Dynamics::Async)),
        Some("sync") => {
            let alpha = alpha.unwrap_or(0.5);
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(TrackError::InvalidConfig(format!("alpha {alpha} outside (0, 1]")));
            }
            Ok(Some(Dynamics::Sync { alpha }))
        }
        Some(other) => Err(TrackError::InvalidConfig(format!("unknown dynamics {other:?}"))),
    }
}
