//! Pillar-style radar rasterizer: points group into grid pillars, a shared
//! per-point linear layer plus ReLU feeds a per-pillar max-pool, and the
//! pooled vectors scatter onto the BEV grid. Trains jointly with the rest
//! of the stage, so the max-pool argmaxes are kept for the backward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::features::FeatureMap;
use crate::geometry::BevGridSpec;
use crate::numerics::{DenseArray, NumericsError, ParamBundle};

/// One radar return: position, radial velocity, cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vr: f64,
    pub rcs: f64,
}

pub const RADAR_POINT_FEATURES: usize = 6;

/// Per-point input: offsets from the pillar center, height, radial velocity,
/// cross-section, and the log point count of the pillar.
fn point_features(p: &RadarPoint, cx: f64, cy: f64, count: usize) -> [f64; RADAR_POINT_FEATURES] {
    [p.x - cx, p.y - cy, p.z, p.vr, p.rcs, (1.0 + count as f64).ln()]
}

struct PillarCtx {
    iy: usize,
    ix: usize,
    feats: Vec<[f64; RADAR_POINT_FEATURES]>,
    /// Per channel: winning point and its pooled (post-ReLU) value.
    winners: Vec<(usize, f64)>,
}

pub struct RadarEncodeCtx {
    channels: usize,
    pillars: Vec<PillarCtx>,
    pub dropped_points: usize,
}

/// Rasterizes radar points onto the grid. Out-of-range points are dropped
/// and counted; empty pillars stay zero.
pub fn encode_radar(
    points: &[RadarPoint],
    grid: &BevGridSpec,
    params: &ParamBundle,
    prefix: &str,
) -> Result<(FeatureMap, RadarEncodeCtx), NumericsError> {
    let w = params.value(&format!("{prefix}.w"))?;
    let b = params.value(&format!("{prefix}.b"))?;
    let channels = w.dim(1);
    if w.shape() != [RADAR_POINT_FEATURES, channels] || b.shape() != [channels] {
        return Err(NumericsError::ShapeMismatch {
            expected: vec![RADAR_POINT_FEATURES, channels],
            got: w.shape().to_vec(),
        });
    }

    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut dropped = 0usize;
    for (i, p) in points.iter().enumerate() {
        let idx = grid.index_of(p.x, p.y);
        if idx.in_range {
            groups.entry((idx.iy as usize, idx.ix as usize)).or_default().push(i);
        } else {
            dropped += 1;
        }
    }

    let mut map = FeatureMap::zeros(*grid, channels);
    let wd = w.data();
    let bd = b.data();
    let mut pillars = Vec::with_capacity(groups.len());
    for ((iy, ix), members) in groups {
        let (cx, cy) = grid.cell_center(ix as i64, iy as i64);
        let count = members.len();
        let feats: Vec<[f64; RADAR_POINT_FEATURES]> =
            members.iter().map(|&i| point_features(&points[i], cx, cy, count)).collect();
        let mut winners = vec![(0usize, f64::NEG_INFINITY); channels];
        for (local, feat) in feats.iter().enumerate() {
            for c in 0..channels {
                let mut pre = bd[c];
                for (f, &xv) in feat.iter().enumerate() {
                    pre += xv * wd[f * channels + c];
                }
                let post = pre.max(0.0);
                if post > winners[c].1 {
                    winners[c] = (local, post);
                }
            }
        }
        for c in 0..channels {
            map.set(c, iy, ix, winners[c].1);
        }
        pillars.push(PillarCtx { iy, ix, feats, winners });
    }
    Ok((map, RadarEncodeCtx { channels, pillars, dropped_points: dropped }))
}

/// Accumulates parameter gradients from a gradient over the rasterized map.
pub fn encode_radar_backward(
    ctx: &RadarEncodeCtx,
    grad_map: &DenseArray,
    params: &mut ParamBundle,
    prefix: &str,
) -> Result<(), NumericsError> {
    let channels = ctx.channels;
    let h = grad_map.dim(1);
    let w_dim = grad_map.dim(2);
    let mut gw = DenseArray::zeros(&[RADAR_POINT_FEATURES, channels]);
    let mut gb = DenseArray::zeros(&[channels]);
    for pillar in &ctx.pillars {
        debug_assert!(pillar.iy < h && pillar.ix < w_dim);
        for c in 0..channels {
            let g = grad_map.at3(c, pillar.iy, pillar.ix);
            let (winner, value) = pillar.winners[c];
            if g == 0.0 || value <= 0.0 {
                continue;
            }
            let feat = &pillar.feats[winner];
            for (f, &xv) in feat.iter().enumerate() {
                let idx = f * channels + c;
                gw.data_mut()[idx] += xv * g;
            }
            gb.data_mut()[c] += g;
        }
    }
    params.accumulate(&format!("{prefix}.w"), &gw)?;
    params.accumulate(&format!("{prefix}.b"), &gb)?;
    Ok(())
}
