//! Detection scoring: score-ranked greedy matching per class on BEV IoU and
//! 40-point interpolated average precision, with rectangular evaluation
//! regions (full area or near-field corridor).

use crate::geometry::{iou_bev, BevGridSpec, Box3D, GeometryError};

/// Per-class BEV IoU thresholds: cars are held to 0.5, the small classes
/// to 0.25.
pub const DEFAULT_IOU_THR: [f64; 3] = [0.5, 0.25, 0.25];

/// Axis-aligned evaluation region; membership is tested on box centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl EvalRegion {
    /// The entire annotated area: everything on the grid.
    pub fn eaa(grid: &BevGridSpec) -> Self {
        Self { x_min: grid.x_min, x_max: grid.x_max, y_min: grid.y_min, y_max: grid.y_max }
    }

    /// Near-field driving corridor: within 4 m laterally, under 25 m ahead.
    pub fn roi(grid: &BevGridSpec) -> Self {
        let eaa = Self::eaa(grid);
        Self {
            x_min: eaa.x_min,
            x_max: eaa.x_max.min(25.0),
            y_min: eaa.y_min.max(-4.0),
            y_max: eaa.y_max.min(4.0),
        }
    }

    pub fn contains(&self, b: &Box3D) -> bool {
        self.x_min <= b.x && b.x < self.x_max && self.y_min <= b.y && b.y < self.y_max
    }
}

#[derive(Debug, Clone)]
pub struct ApReport {
    /// AP per class; `None` where the ground truth has no such objects.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined classes, 0 when none are.
    pub map: f64,
}

/// 40-point interpolated AP over score-ranked greedy matching. Each ground
/// truth is claimed by at most one detection and vice versa; the region
/// filter applies to both sides.
pub fn evaluate_ap(
    dets: &[Vec<Box3D>],
    gts: &[Vec<Box3D>],
    iou_thr: &[f64],
    region: &EvalRegion,
) -> Result<ApReport, GeometryError> {
    let frames = dets.len().max(gts.len());
    let empty: Vec<Box3D> = Vec::new();
    let det_frame = |t: usize| dets.get(t).unwrap_or(&empty);
    let gt_frame = |t: usize| gts.get(t).unwrap_or(&empty);

    let mut per_class = Vec::with_capacity(iou_thr.len());
    for (cls, &thr) in iou_thr.iter().enumerate() {
        let cls = cls as u32;
        // In-region ground truth per frame, with match flags.
        let mut gt_slots: Vec<Vec<&Box3D>> = Vec::with_capacity(frames);
        let mut gt_count = 0usize;
        for t in 0..frames {
            let slot: Vec<&Box3D> = gt_frame(t)
                .iter()
                .filter(|g| g.cls == cls && region.contains(g))
                .collect();
            gt_count += slot.len();
            gt_slots.push(slot);
        }
        if gt_count == 0 {
            per_class.push(None);
            continue;
        }
        let mut taken: Vec<Vec<bool>> = gt_slots.iter().map(|s| vec![false; s.len()]).collect();

        // Rank detections by score, ties broken by frame then input order so
        // the curve is reproducible.
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for t in 0..frames {
            for (i, d) in det_frame(t).iter().enumerate() {
                if d.cls == cls && region.contains(d) {
                    ranked.push((d.score, t, i));
                }
            }
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        });

        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
        for &(_, t, i) in &ranked {
            let d = &det_frame(t)[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gt_slots[t].iter().enumerate() {
                if taken[t][g] {
                    continue;
                }
                let iou = iou_bev(d, gt)?;
                if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[t][g] = true;
                    tp += 1;
                }
                None => fp += 1,
            }
            curve.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
        }

        let mut psum = 0.0;
        for k in 1..=40 {
            let r = k as f64 / 40.0;
            let p = curve
                .iter()
                .filter(|&&(rec, _)| rec >= r - 1e-12)
                .map(|&(_, prec)| prec)
                .fold(0.0, f64::max);
            psum += p;
        }
        per_class.push(Some(psum / 40.0));
    }

    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map =
        if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
    Ok(ApReport { per_class, map })
}

/// Identity changes along per-object track-id sequences; gaps (`None`) do
/// not count, re-acquiring a different id after a gap does.
pub fn id_switches(assignments: &[Vec<Option<u64>>]) -> usize {
    let mut switches = 0;
    for seq in assignments {
        let mut last: Option<u64> = None;
        for id in seq.iter().flatten() {
            if let Some(prev) = last {
                if prev != *id {
                    switches += 1;
                }
            }
            last = Some(*id);
        }
    }
    switches
}
