//! Detection loss: smooth-L1 on positive-anchor box deltas, focal loss on
//! non-ignored objectness, and a two-bin direction cross-entropy, each
//! normalized by the positive count and combined with fixed weights.

use serde::{Deserialize, Serialize};

use crate::numerics::{DenseArray, NumericsError};

use super::anchors::AnchorTargets;
use super::head::HeadOut;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const SMOOTH_L1_DELTA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { loc: 2.0, cls: 1.0, dir: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), NumericsError> {
        if self.loc < 0.0 || self.cls < 0.0 || self.dir < 0.0 {
            return Err(NumericsError::Invalid("loss weights must be nonnegative".into()));
        }
        if self.loc + self.cls + self.dir <= 0.0 {
            return Err(NumericsError::Invalid("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
    pub num_pos: usize,
}

/// Gradients w.r.t. the head's raw outputs, already weighted and normalized.
pub struct LossGrads {
    pub cls: DenseArray,
    pub boxes: DenseArray,
    pub dir: DenseArray,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Focal term and d/d(logit) for one anchor.
fn focal(x: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(x);
    let q = 1.0 - p;
    if positive {
        let ln_p = -softplus(-x);
        let loss = FOCAL_ALPHA * q.powf(FOCAL_GAMMA) * -ln_p;
        let grad = FOCAL_ALPHA * q.powf(FOCAL_GAMMA) * (FOCAL_GAMMA * p * ln_p - q);
        (loss, grad)
    } else {
        let ln_q = -softplus(x);
        let loss = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -ln_q;
        let grad = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * (p - FOCAL_GAMMA * q * ln_q);
        (loss, grad)
    }
}

fn smooth_l1(e: f64) -> (f64, f64) {
    if e.abs() < SMOOTH_L1_DELTA {
        (0.5 * e * e / SMOOTH_L1_DELTA, e / SMOOTH_L1_DELTA)
    } else {
        (e.abs() - 0.5 * SMOOTH_L1_DELTA, e.signum())
    }
}

/// Evaluate the weighted loss and its gradients in one pass. Target layout
/// follows the anchor flat index, matching the `[A, H, W]` output planes.
pub fn detection_loss(
    out: &HeadOut,
    targets: &AnchorTargets,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGrads), NumericsError> {
    weights.validate()?;
    let (na, h, w) = (out.cls.dim(0), out.cls.dim(1), out.cls.dim(2));
    let cells = h * w;
    let n = na * cells;
    if targets.labels.len() != n {
        return Err(NumericsError::Invalid(format!(
            "{} targets for {n} anchors",
            targets.labels.len()
        )));
    }
    let norm = 1.0 / targets.num_pos.max(1) as f64;

    let mut g_cls = DenseArray::zeros(out.cls.shape());
    let mut g_box = DenseArray::zeros(out.boxes.shape());
    let mut g_dir = DenseArray::zeros(out.dir.shape());
    let (mut l_loc, mut l_cls, mut l_dir) = (0.0, 0.0, 0.0);

    let cls_d = out.cls.data();
    let box_d = out.boxes.data();
    let dir_d = out.dir.data();
    for id in 0..n {
        let label = targets.labels[id];
        let a = id / cells;
        let cell = id % cells;
        if label >= 0 {
            let (fl, fg) = focal(cls_d[id], label == 1);
            l_cls += fl * norm;
            g_cls.data_mut()[id] = fg * norm * weights.cls;
        }
        if label == 1 {
            for k in 0..7 {
                let i = (a * 7 + k) * cells + cell;
                let (sl, sg) = smooth_l1(box_d[i] - targets.box_targets[id][k]);
                l_loc += sl * norm;
                g_box.data_mut()[i] = sg * norm * weights.loc;
            }
            let i0 = (a * 2) * cells + cell;
            let i1 = (a * 2 + 1) * cells + cell;
            let (z0, z1) = (dir_d[i0], dir_d[i1]);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let zt = if targets.dir_targets[id] == 0 { z0 } else { z1 };
            l_dir += (lse - zt) * norm;
            let p0 = (z0 - lse).exp();
            let p1 = (z1 - lse).exp();
            let (t0, t1) = if targets.dir_targets[id] == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
            g_dir.data_mut()[i0] = (p0 - t0) * norm * weights.dir;
            g_dir.data_mut()[i1] = (p1 - t1) * norm * weights.dir;
        }
    }

    let total = weights.loc * l_loc + weights.cls * l_cls + weights.dir * l_dir;
    Ok((
        LossBreakdown { total, loc: l_loc, cls: l_cls, dir: l_dir, num_pos: targets.num_pos },
        LossGrads { cls: g_cls, boxes: g_box, dir: g_dir },
    ))
}
