//! Per-class anchor grids, box-delta encoding, and IoU-based target
//! assignment for the dense detection head.
//!
//! Anchors are laid out one set per cell: for every class and every yaw in
//! the config, in that order, so anchor index `a = class * yaws + yaw`. A
//! flat anchor id is `(a * H + iy) * W + ix`, matching an `[A, H, W]` plane.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

use crate::geometry::{iou_bev, wrap_angle, BevGridSpec, Box3D, GeometryError};

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("anchor config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAnchor {
    pub name: String,
    pub l: f64,
    pub w: f64,
    pub d: f64,
    /// Height of the anchor's center above the ground plane.
    pub z: f64,
    pub match_iou: f64,
    pub ignore_iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub classes: Vec<ClassAnchor>,
    pub yaws: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        let cls = |name: &str, l: f64, w: f64, d: f64, match_iou: f64, ignore_iou: f64| {
            ClassAnchor { name: name.into(), l, w, d, z: d / 2.0, match_iou, ignore_iou }
        };
        Self {
            classes: vec![
                cls("car", 3.9, 1.6, 1.56, 0.6, 0.45),
                cls("pedestrian", 0.8, 0.6, 1.73, 0.5, 0.35),
                cls("cyclist", 1.76, 0.6, 1.73, 0.5, 0.35),
            ],
            yaws: vec![0.0, FRAC_PI_2],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.classes.is_empty() || self.yaws.is_empty() {
            return Err(AnchorError::BadConfig("needs at least one class and one yaw".into()));
        }
        for c in &self.classes {
            if !(c.l > 0.0 && c.w > 0.0 && c.d > 0.0) {
                return Err(AnchorError::BadConfig(format!(
                    "{}: non-positive size {}x{}x{}",
                    c.name, c.l, c.w, c.d
                )));
            }
            if c.match_iou <= c.ignore_iou {
                return Err(AnchorError::BadConfig(format!(
                    "{}: match threshold {} must exceed ignore threshold {}",
                    c.name, c.match_iou, c.ignore_iou
                )));
            }
        }
        Ok(())
    }

    /// Anchors per cell.
    pub fn num_anchors(&self) -> usize {
        self.classes.len() * self.yaws.len()
    }

    pub fn class_of(&self, a: usize) -> usize {
        a / self.yaws.len()
    }

    pub fn anchor_box(&self, grid: &BevGridSpec, a: usize, iy: usize, ix: usize) -> Box3D {
        let cls = self.class_of(a);
        let c = &self.classes[cls];
        let (x, y) = grid.cell_center(ix as i64, iy as i64);
        let yaw = self.yaws[a % self.yaws.len()];
        Box3D::new(x, y, c.z, c.l, c.w, c.d, yaw, cls as u32, 1.0).expect("anchor geometry")
    }
}

pub fn anchor_index(a: usize, iy: usize, ix: usize, h: usize, w: usize) -> usize {
    (a * h + iy) * w + ix
}

/// Deltas `[dx, dy, dz, dl, dw, dd, dtheta]`: centers normalized by the
/// anchor footprint diagonal (z by anchor height), sizes as log ratios, yaw
/// as the wrapped residual.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> [f64; 7] {
    let diag = anchor.l.hypot(anchor.w);
    [
        (gt.x - anchor.x) / diag,
        (gt.y - anchor.y) / diag,
        (gt.z - anchor.z) / anchor.d,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.d / anchor.d).ln(),
        wrap_angle(gt.theta - anchor.theta),
    ]
}

pub fn decode_box(delta: &[f64], anchor: &Box3D, score: f64) -> Result<Box3D, GeometryError> {
    debug_assert_eq!(delta.len(), 7);
    let diag = anchor.l.hypot(anchor.w);
    Box3D::new(
        anchor.x + delta[0] * diag,
        anchor.y + delta[1] * diag,
        anchor.z + delta[2] * anchor.d,
        anchor.l * delta[3].exp(),
        anchor.w * delta[4].exp(),
        anchor.d * delta[5].exp(),
        wrap_angle(anchor.theta + delta[6]),
        anchor.cls,
        score,
    )
}

/// Two-bin orientation class: 0 when the wrapped residual lies in
/// [-pi/2, pi/2), 1 when the box points the other way.
pub fn dir_bin(gt_theta: f64, anchor_theta: f64) -> usize {
    let d = wrap_angle(gt_theta - anchor_theta);
    usize::from(!(-FRAC_PI_2..FRAC_PI_2).contains(&d))
}

/// Per-anchor assignment: 1 = positive, 0 = negative, -1 = ignore band.
#[derive(Debug, Clone)]
pub struct AnchorTargets {
    pub labels: Vec<i8>,
    pub box_targets: Vec<[f64; 7]>,
    pub dir_targets: Vec<u8>,
    pub num_pos: usize,
}

/// Threshold matching on BEV IoU against same-class ground truth, with the
/// best anchor of every ground-truth box forced positive so no object goes
/// unsupervised.
pub fn assign_targets(
    cfg: &AnchorConfig,
    grid: &BevGridSpec,
    gts: &[Box3D],
) -> Result<AnchorTargets, GeometryError> {
    let (h, w) = (grid.height, grid.width);
    let na = cfg.num_anchors() * h * w;
    let mut labels = vec![0i8; na];
    let mut box_targets = vec![[0.0; 7]; na];
    let mut dir_targets = vec![0u8; na];

    let mut best_iou = vec![0.0f64; na];
    let mut best_gt = vec![usize::MAX; na];
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, usize::MAX); gts.len()];

    for a in 0..cfg.num_anchors() {
        let cls = cfg.class_of(a);
        let spec = &cfg.classes[cls];
        let reach = spec.l.hypot(spec.w) / 2.0;
        for iy in 0..h {
            for ix in 0..w {
                let id = anchor_index(a, iy, ix, h, w);
                let (cx, cy) = grid.cell_center(ix as i64, iy as i64);
                for (g, gt) in gts.iter().enumerate() {
                    if gt.cls as usize != cls {
                        continue;
                    }
                    // Disjoint when centers are farther than both half-diagonals.
                    let r = reach + gt.l.hypot(gt.w) / 2.0;
                    if (gt.x - cx).powi(2) + (gt.y - cy).powi(2) > r * r {
                        continue;
                    }
                    let anchor = cfg.anchor_box(grid, a, iy, ix);
                    let iou = iou_bev(&anchor, gt)?;
                    if iou > best_iou[id] {
                        best_iou[id] = iou;
                        best_gt[id] = g;
                    }
                    if iou > gt_best[g].0 {
                        gt_best[g] = (iou, id);
                    }
                }
            }
        }
    }

    for id in 0..na {
        if best_gt[id] == usize::MAX {
            continue;
        }
        let cls = cfg.class_of(id / (h * w));
        let spec = &cfg.classes[cls];
        if best_iou[id] >= spec.match_iou {
            labels[id] = 1;
        } else if best_iou[id] >= spec.ignore_iou {
            labels[id] = -1;
        }
    }
    // A small object can fall between anchor centers with zero overlap
    // everywhere; pin such a ground truth to the same-class anchor at the
    // nearest cell (best-aligned yaw bin) so nothing goes unsupervised.
    for (g, gt) in gts.iter().enumerate() {
        if gt_best[g].0 > 0.0 {
            continue;
        }
        let cls = gt.cls as usize;
        if cls >= cfg.classes.len() {
            continue;
        }
        let (fx, fy) = grid.fractional(gt.x, gt.y);
        let ix = (fx.floor() as i64).clamp(0, w as i64 - 1) as usize;
        let iy = (fy.floor() as i64).clamp(0, h as i64 - 1) as usize;
        let mut a = cls * cfg.yaws.len();
        let mut best_turn = f64::INFINITY;
        for (j, &yaw) in cfg.yaws.iter().enumerate() {
            let turn = wrap_angle(gt.theta - yaw).abs();
            if turn < best_turn {
                best_turn = turn;
                a = cls * cfg.yaws.len() + j;
            }
        }
        gt_best[g] = (0.0, anchor_index(a, iy, ix, h, w));
    }
    // Force the best anchor of each ground truth positive; on a conflict the
    // higher-IoU pairing keeps the anchor (ties go to the earlier object).
    for (g, &(iou, id)) in gt_best.iter().enumerate() {
        if id == usize::MAX {
            continue;
        }
        if labels[id] == 1 && best_gt[id] != g && best_iou[id] >= iou {
            continue;
        }
        labels[id] = 1;
        best_gt[id] = g;
        best_iou[id] = best_iou[id].max(iou);
    }

    let mut num_pos = 0;
    for id in 0..na {
        if labels[id] != 1 {
            continue;
        }
        num_pos += 1;
        let a = id / (h * w);
        let rem = id % (h * w);
        let (iy, ix) = (rem / w, rem % w);
        let anchor = cfg.anchor_box(grid, a, iy, ix);
        let gt = &gts[best_gt[id]];
        box_targets[id] = encode_box(gt, &anchor);
        dir_targets[id] = dir_bin(gt.theta, anchor.theta) as u8;
    }
    Ok(AnchorTargets { labels, box_targets, dir_targets, num_pos })
}
