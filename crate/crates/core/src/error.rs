use thiserror::Error;

/// Errors raised by the tracking engine.
#[derive(Debug, Error)]
pub enum TrackError {
    #[error("degenerate cell: {0}")]
    DegenerateCell(String),

    #[error("invalid frame {frame}: {reason}")]
    InvalidFrame { frame: usize, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-disjoint lineages: {0}")]
    NonDisjointLineages(String),

    #[error("cell loss unsupported: frame {frame} has {next} cells after {current}")]
    CellLoss {
        frame: usize,
        current: usize,
        next: usize,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("mismatched input: {0}")]
    Mismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TrackError {
    /// `true` for errors caused by bad user input rather than I/O or solver failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TrackError::DegenerateCell(_)
                | TrackError::InvalidFrame { .. }
                | TrackError::InvalidConfig(_)
                | TrackError::NonDisjointLineages(_)
                | TrackError::CellLoss { .. }
                | TrackError::Mismatch(_)
                | TrackError::Parse(_)
        )
    }
}

pub type Result<T, E = TrackError> = std::result::Result<T, E>;
