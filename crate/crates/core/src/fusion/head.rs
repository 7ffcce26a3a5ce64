//! Dense anchor head: three 1x1 convolutional predictors over the fused map
//! (per-anchor objectness, box deltas, direction bins), plus decoding into
//! boxes and classwise BEV non-maximum suppression.

use rand::Rng;

use crate::features::FeatureMap;
use crate::geometry::{iou_bev, BevGridSpec, Box3D, GeometryError};
use crate::numerics::ops::{conv2d, conv2d_backward, Conv2dCtx};
use crate::numerics::{xavier_uniform, DenseArray, NumericsError, ParamBundle};

use super::anchors::{anchor_index, decode_box, AnchorConfig};

/// Per-cell predictions: `cls` is `[A, H, W]`, `boxes` `[A*7, H, W]`,
/// `dir` `[A*2, H, W]`.
pub struct HeadOut {
    pub cls: DenseArray,
    pub boxes: DenseArray,
    pub dir: DenseArray,
}

pub struct HeadCtx {
    cls: Conv2dCtx,
    boxes: Conv2dCtx,
    dir: Conv2dCtx,
}

/// Classification bias starts at the focal-loss prior (1% positive rate) so
/// early training is not swamped by the negative sea.
pub fn init_head_params<R: Rng>(
    params: &mut ParamBundle,
    prefix: &str,
    c_in: usize,
    num_anchors: usize,
    rng: &mut R,
) {
    let a = num_anchors;
    params.register(
        &format!("{prefix}.cls.w"),
        xavier_uniform(&[a, c_in, 1, 1], c_in, a, rng),
        true,
    );
    let mut cls_b = DenseArray::zeros(&[a]);
    cls_b.fill(-(99.0f64).ln());
    params.register(&format!("{prefix}.cls.b"), cls_b, true);
    params.register(
        &format!("{prefix}.box.w"),
        xavier_uniform(&[7 * a, c_in, 1, 1], c_in, 7 * a, rng),
        true,
    );
    params.register(&format!("{prefix}.box.b"), DenseArray::zeros(&[7 * a]), true);
    params.register(
        &format!("{prefix}.dir.w"),
        xavier_uniform(&[2 * a, c_in, 1, 1], c_in, 2 * a, rng),
        true,
    );
    params.register(&format!("{prefix}.dir.b"), DenseArray::zeros(&[2 * a]), true);
}

pub fn head_forward(
    fused: &FeatureMap,
    params: &ParamBundle,
    prefix: &str,
) -> Result<(HeadOut, HeadCtx), NumericsError> {
    let x = &fused.data;
    let (cls, cls_ctx) = conv2d(
        x,
        params.value(&format!("{prefix}.cls.w"))?,
        params.value(&format!("{prefix}.cls.b"))?,
    )?;
    let (boxes, box_ctx) = conv2d(
        x,
        params.value(&format!("{prefix}.box.w"))?,
        params.value(&format!("{prefix}.box.b"))?,
    )?;
    let (dir, dir_ctx) = conv2d(
        x,
        params.value(&format!("{prefix}.dir.w"))?,
        params.value(&format!("{prefix}.dir.b"))?,
    )?;
    Ok((HeadOut { cls, boxes, dir }, HeadCtx { cls: cls_ctx, boxes: box_ctx, dir: dir_ctx }))
}

/// Sums the three predictors' input gradients into one fused-map gradient.
pub fn head_backward(
    ctx: &HeadCtx,
    g_cls: &DenseArray,
    g_boxes: &DenseArray,
    g_dir: &DenseArray,
    params: &mut ParamBundle,
    prefix: &str,
) -> Result<DenseArray, NumericsError> {
    let mut total: Option<DenseArray> = None;
    for (branch, cctx, g) in [
        ("cls", &ctx.cls, g_cls),
        ("box", &ctx.boxes, g_boxes),
        ("dir", &ctx.dir, g_dir),
    ] {
        let w = params.value(&format!("{prefix}.{branch}.w"))?.clone();
        let mut gw = DenseArray::zeros(w.shape());
        let mut gb = DenseArray::zeros(&[w.dim(0)]);
        let gx = conv2d_backward(cctx, &w, g, &mut gw, &mut gb);
        params.accumulate(&format!("{prefix}.{branch}.w"), &gw)?;
        params.accumulate(&format!("{prefix}.{branch}.b"), &gb)?;
        match &mut total {
            None => total = Some(gx),
            Some(t) => t.add_assign(&gx)?,
        }
    }
    Ok(total.expect("three branches"))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode every anchor whose objectness clears `score_thr`. The detection
/// class is the anchor's class; scores are sigmoid logits.
pub fn decode_detections(
    out: &HeadOut,
    cfg: &AnchorConfig,
    grid: &BevGridSpec,
    score_thr: f64,
) -> Result<Vec<Box3D>, GeometryError> {
    let (h, w) = (grid.height, grid.width);
    let na = cfg.num_anchors();
    debug_assert_eq!(out.cls.shape(), [na, h, w]);
    let mut dets = Vec::new();
    for a in 0..na {
        for iy in 0..h {
            for ix in 0..w {
                let score = sigmoid(out.cls.at3(a, iy, ix));
                if score < score_thr {
                    continue;
                }
                let anchor = cfg.anchor_box(grid, a, iy, ix);
                let delta: Vec<f64> =
                    (0..7).map(|k| out.boxes.at3(a * 7 + k, iy, ix)).collect();
                dets.push(decode_box(&delta, &anchor, score)?);
            }
        }
    }
    Ok(dets)
}

/// Flat anchor ids of the detections `decode_detections` would emit, in the
/// same order; used to map dense targets onto decoded boxes in diagnostics.
pub fn decoded_anchor_ids(
    out: &HeadOut,
    cfg: &AnchorConfig,
    grid: &BevGridSpec,
    score_thr: f64,
) -> Vec<usize> {
    let (h, w) = (grid.height, grid.width);
    let mut ids = Vec::new();
    for a in 0..cfg.num_anchors() {
        for iy in 0..h {
            for ix in 0..w {
                if sigmoid(out.cls.at3(a, iy, ix)) >= score_thr {
                    ids.push(anchor_index(a, iy, ix, h, w));
                }
            }
        }
    }
    ids
}

/// Greedy classwise suppression on BEV IoU, highest score first. Ties break
/// on position bits so the result is deterministic.
pub fn nms_bev(mut dets: Vec<Box3D>, iou_thr: f64, max_keep: usize) -> Vec<Box3D> {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.cls.cmp(&b.cls))
            .then(a.x.to_bits().cmp(&b.x.to_bits()))
            .then(a.y.to_bits().cmp(&b.y.to_bits()))
    });
    let mut keep: Vec<Box3D> = Vec::new();
    for d in dets {
        if keep.len() >= max_keep {
            break;
        }
        let suppressed = keep
            .iter()
            .filter(|k| k.cls == d.cls)
            .any(|k| iou_bev(k, &d).map(|iou| iou > iou_thr).unwrap_or(false));
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}
