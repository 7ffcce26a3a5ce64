//! Trajectory-guided multi-frame fusion for BEV object detection.
//!
//! A streaming tracker turns per-frame detections into reference
//! trajectories and candidate sets; a FIFO memory bank keeps the last n
//! frames of BEV features; aggregation modules gather evidence along each
//! trajectory at object and grid level, reason over time, and reproject the
//! result onto the current frame, where a small convolutional head refines
//! the detections. Everything runs in 64-bit floats with hand-written
//! backward passes.

// Kernel code indexes several arrays from one loop counter; zip chains would
// obscure the math, so the pedantic loop lint stays off crate-wide.
#![allow(clippy::needless_range_loop)]

pub mod aggregation;
pub mod config;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod memory;
pub mod numerics;
pub mod pipeline;
pub mod radar;
pub mod tracker;
