//! Trajectory-guided feature aggregation.
//!
//! Three mechanisms operate per trajectory over the memory-bank window:
//! candidate-set aggregation on the global map ([`goa_frame`]), deformable
//! cross-level attention on the local map ([`lga_frame`]), and temporal
//! attention over the per-frame vectors ([`mstr`]). Each forward returns a
//! context consumed by the matching backward.

pub mod goa;
pub mod lga;
pub mod mstr;

pub use goa::{goa_frame, goa_frame_backward, init_goa_params, GoaCtx, GoaFrame};
pub use lga::{init_lga_params, lga_backward, lga_frame, LgaConfig, LgaCtx};
pub use mstr::{init_mstr_params, mstr, mstr_backward, MstrCtx};

use crate::geometry::BevIndex;
use crate::numerics::NumericsError;

/// Hard cap on proposals kept per trajectory per frame.
pub const MAX_CANDIDATES_PER_SLOT: usize = 5;

/// One candidate proposal: where it lands on the grid plus its detector score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: BevIndex,
    pub score: f64,
}

/// Per-(trajectory, frame) slot. `reference` is the assigned detection's grid
/// location when the track matched that frame; `candidates` holds the
/// high-overlap proposal set (may be non-empty even on missed frames).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajSlot {
    pub reference: Option<BevIndex>,
    pub candidates: Vec<Candidate>,
}

impl TrajSlot {
    /// The global branch aggregates candidate cells; valid iff any is usable.
    pub fn global_valid(&self) -> bool {
        self.candidates.iter().any(|c| c.index.in_range)
    }

    /// The local branch needs an in-range reference point.
    pub fn local_valid(&self) -> bool {
        self.reference.is_some_and(|r| r.in_range)
    }
}

/// All live trajectories over one memory-bank window. Slots are stored
/// row-major `[trajectory][frame]` with frame 0 the oldest; `current_index`
/// is each track's predicted grid cell at the newest frame, which is where
/// its fused feature is written back.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    track_ids: Vec<u64>,
    frame_ids: Vec<u64>,
    slots: Vec<TrajSlot>,
    current_index: Vec<BevIndex>,
}

impl TrajectoryBatch {
    pub fn new(
        track_ids: Vec<u64>,
        frame_ids: Vec<u64>,
        slots: Vec<TrajSlot>,
        current_index: Vec<BevIndex>,
    ) -> Result<Self, NumericsError> {
        if frame_ids.is_empty() {
            return Err(NumericsError::Invalid("empty frame window".into()));
        }
        if !frame_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(NumericsError::Invalid("window frames must increase".into()));
        }
        if slots.len() != track_ids.len() * frame_ids.len() {
            return Err(NumericsError::Invalid(format!(
                "{} slots for {} trajectories x {} frames",
                slots.len(),
                track_ids.len(),
                frame_ids.len()
            )));
        }
        if current_index.len() != track_ids.len() {
            return Err(NumericsError::Invalid("one current index per trajectory".into()));
        }
        if let Some(s) = slots.iter().find(|s| s.candidates.len() > MAX_CANDIDATES_PER_SLOT) {
            return Err(NumericsError::Invalid(format!(
                "slot holds {} candidates, cap is {MAX_CANDIDATES_PER_SLOT}",
                s.candidates.len()
            )));
        }
        Ok(Self { track_ids, frame_ids, slots, current_index })
    }

    pub fn num_traj(&self) -> usize {
        self.track_ids.len()
    }

    /// Window length in frames.
    pub fn window(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn track_ids(&self) -> &[u64] {
        &self.track_ids
    }

    pub fn frame_ids(&self) -> &[u64] {
        &self.frame_ids
    }

    pub fn slot(&self, traj: usize, frame: usize) -> &TrajSlot {
        &self.slots[traj * self.window() + frame]
    }

    pub fn current_index(&self, traj: usize) -> BevIndex {
        self.current_index[traj]
    }

    /// Row-major `[trajectory][frame]` validity of the candidate branch.
    pub fn global_mask(&self) -> Vec<bool> {
        self.slots.iter().map(TrajSlot::global_valid).collect()
    }

    /// Row-major `[trajectory][frame]` validity of the reference branch.
    pub fn local_mask(&self) -> Vec<bool> {
        self.slots.iter().map(TrajSlot::local_valid).collect()
    }
}

/// Sinusoidal encoding of a grid position, `c / 4` frequency bands per axis.
pub fn positional_encoding(fx: f64, fy: f64, c: usize) -> Vec<f64> {
    assert!(c >= 4 && c.is_multiple_of(4), "position encoding needs a multiple of 4 channels, got {c}");
    let mut pe = vec![0.0; c];
    for i in 0..c / 4 {
        let omega = 10000f64.powf(-(4.0 * i as f64) / c as f64);
        pe[4 * i] = (fx * omega).sin();
        pe[4 * i + 1] = (fx * omega).cos();
        pe[4 * i + 2] = (fy * omega).sin();
        pe[4 * i + 3] = (fy * omega).cos();
    }
    pe
}

/// Sinusoidal encoding of a frame's age (0 = current frame). The cosine
/// lanes are shifted by -1 so age 0 encodes to exact zeros.
pub fn time_encoding(age: f64, c: usize) -> Vec<f64> {
    assert!(c >= 2 && c.is_multiple_of(2), "time encoding needs an even channel count, got {c}");
    let mut te = vec![0.0; c];
    for i in 0..c / 2 {
        let omega = 10000f64.powf(-(2.0 * i as f64) / c as f64);
        te[2 * i] = (age * omega).sin();
        te[2 * i + 1] = (age * omega).cos() - 1.0;
    }
    te
}
