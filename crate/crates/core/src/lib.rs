//! Frame-to-frame registration and division-lineage reconstruction for dense
//! mono-layer colonies of rod-shaped cells.
//!
//! Each interframe is solved in two stages. Divisions are detected first by a
//! cardinality-constrained binary Boltzmann machine over plausible children
//! pairs ([`division`]); the parent-children triplets are then removed and the
//! residual one-to-one registration is found by annealing a clique-factored
//! energy ([`registration`], [`annealer`]). A synthetic colony generator
//! ([`simulator`]) provides ground truth, and [`calibration`] estimates cost
//! weights from a known mapping.

pub mod annealer;
pub mod calibration;
pub mod division;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lineage;
pub mod pipeline;
pub mod registration;
pub mod simulator;

pub use annealer::{anneal, AnnealResult, BmConfig, CliqueProblem, Dynamics, Schedule};
pub use error::{Result, TrackError};
pub use geometry::{Cell, CellId, Frame, NeighborGraph, Rect, Vec2};
pub use lineage::{LineageEntry, LineageRecord};
pub use simulator::{simulate, SimConfig, Simulation};
pub use pipeline::{score, track_sequence, AccuracyReport, PipelineConfig};
