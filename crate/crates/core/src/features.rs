//! Channel-major BEV feature maps with explicit metric extent.

use thiserror::Error;

use crate::geometry::BevGridSpec;
use crate::numerics::{ops, DenseArray};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature payload {got:?} does not match grid {expected:?}")]
    GridMismatch { expected: Vec<usize>, got: Vec<usize> },
}

/// [C, H, W] feature grid tied to the metric extent it was rasterized on.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: BevGridSpec,
    pub data: DenseArray,
}

impl FeatureMap {
    pub fn zeros(grid: BevGridSpec, channels: usize) -> Self {
        Self { grid, data: DenseArray::zeros(&[channels, grid.height, grid.width]) }
    }

    pub fn from_array(grid: BevGridSpec, data: DenseArray) -> Result<Self, FeatureError> {
        let expected = [data.dim(0), grid.height, grid.width];
        if data.rank() != 3 || data.shape() != expected {
            return Err(FeatureError::GridMismatch {
                expected: expected.to_vec(),
                got: data.shape().to_vec(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }

    pub fn at(&self, c: usize, iy: usize, ix: usize) -> f64 {
        self.data.at3(c, iy, ix)
    }

    pub fn set(&mut self, c: usize, iy: usize, ix: usize, v: f64) {
        self.data.set3(c, iy, ix, v);
    }

    /// All channels at an integer cell; callers guard the range.
    pub fn column(&self, iy: usize, ix: usize) -> Vec<f64> {
        (0..self.channels()).map(|c| self.at(c, iy, ix)).collect()
    }

    /// Bilinear sample in array coordinates (integer coordinates sit on cell
    /// centers, so boundary-based fractional coordinates need a -0.5 shift),
    /// zero outside.
    pub fn sample(&self, fx: f64, fy: f64) -> Vec<f64> {
        ops::bilinear_sample(&self.data, fx, fy)
    }

    pub fn payload_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }
}
