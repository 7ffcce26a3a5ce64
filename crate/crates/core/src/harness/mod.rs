//! Synthetic scenes, file formats, and AP scoring: everything needed to
//! exercise and grade the pipeline without a real dataset.

pub mod eval;
pub mod io;
pub mod scenario;

use thiserror::Error;

use crate::features::FeatureError;
use crate::geometry::GeometryError;
use crate::memory::MemoryError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    BadScenario(String),
    #[error("frame {t} out of range (scenario has {frames})")]
    FrameOutOfRange { t: u64, frames: u64 },
    #[error("{path}:{line}: {msg}")]
    BadLine { path: String, line: usize, msg: String },
    #[error("bad magic bytes, not a frame dump")]
    BadMagic,
    #[error("unsupported dump version {0}")]
    BadVersion(u16),
    #[error("checksum mismatch, file corrupt")]
    BadChecksum,
    #[error("file truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub use eval::{evaluate_ap, id_switches, ApReport, EvalRegion};
pub use io::{
    read_detections, read_frame_record, read_track_log, write_detections, write_frame_record,
    write_track_log, TrackSnap,
};
pub use scenario::{generate_frame, FrameTruth, NoiseSpec, ObjectSpec, ScenarioSpec};
