//! Per-frame records and the fixed-capacity FIFO bank that shares them.

use std::collections::VecDeque;
use std::sync::Arc;

use thiserror::Error;

use crate::features::FeatureMap;
use crate::geometry::{BevIndex, Box3D};
use crate::radar::RadarPoint;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("bank capacity must be at least 1")]
    ZeroCapacity,
    #[error("frame {got} is not newer than stored frame {newest}")]
    OutOfOrderFrame { newest: u64, got: u64 },
    #[error("window requested from an empty bank")]
    EmptyBank,
    #[error("{dets} detections but {indexes} grid indexes")]
    IndexMismatch { dets: usize, indexes: usize },
    #[error("local map is {got:?}, expected exactly twice the global resolution {expected:?}")]
    LocalResolution { expected: (usize, usize), got: (usize, usize) },
}

/// Everything the fusion stage needs from one frame: coarse and fine feature
/// maps, the initial detections with their grid indexes, and raw radar hits.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub global: FeatureMap,
    pub local: FeatureMap,
    pub dets: Vec<Box3D>,
    pub indexes: Vec<BevIndex>,
    pub radar: Vec<RadarPoint>,
}

impl FrameRecord {
    pub fn new(
        frame_id: u64,
        global: FeatureMap,
        local: FeatureMap,
        dets: Vec<Box3D>,
        indexes: Vec<BevIndex>,
        radar: Vec<RadarPoint>,
    ) -> Result<Self, MemoryError> {
        if dets.len() != indexes.len() {
            return Err(MemoryError::IndexMismatch { dets: dets.len(), indexes: indexes.len() });
        }
        let expected = (2 * global.grid.height, 2 * global.grid.width);
        let got = (local.grid.height, local.grid.width);
        if expected != got {
            return Err(MemoryError::LocalResolution { expected, got });
        }
        Ok(Self { frame_id, global, local, dets, indexes, radar })
    }

    pub fn payload_bytes(&self) -> usize {
        self.global.payload_bytes()
            + self.local.payload_bytes()
            + self.dets.len() * std::mem::size_of::<Box3D>()
            + self.indexes.len() * std::mem::size_of::<BevIndex>()
            + self.radar.len() * std::mem::size_of::<RadarPoint>()
    }
}

/// FIFO over the most recent `capacity` frames. Records are shared, never
/// copied; pushing past capacity evicts and releases the oldest.
#[derive(Debug)]
pub struct MemoryBank {
    capacity: usize,
    records: VecDeque<Arc<FrameRecord>>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        Ok(Self { capacity, records: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Returns the evicted record, if the bank was full.
    pub fn push(&mut self, rec: Arc<FrameRecord>) -> Result<Option<Arc<FrameRecord>>, MemoryError> {
        if let Some(newest) = self.records.back() {
            if rec.frame_id <= newest.frame_id {
                return Err(MemoryError::OutOfOrderFrame {
                    newest: newest.frame_id,
                    got: rec.frame_id,
                });
            }
        }
        let evicted =
            if self.records.len() == self.capacity { self.records.pop_front() } else { None };
        self.records.push_back(rec);
        Ok(evicted)
    }

    /// Stored records oldest to newest.
    pub fn window(&self) -> Result<Vec<Arc<FrameRecord>>, MemoryError> {
        if self.records.is_empty() {
            return Err(MemoryError::EmptyBank);
        }
        Ok(self.records.iter().cloned().collect())
    }

    pub fn newest(&self) -> Option<&Arc<FrameRecord>> {
        self.records.back()
    }

    /// Bytes held by stored feature payloads; bounded by capacity times the
    /// largest record.
    pub fn resident_bytes(&self) -> usize {
        self.records.iter().map(|r| r.payload_bytes()).sum()
    }
}
