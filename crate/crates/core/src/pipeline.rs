//! The second stage end to end: turn track logs into trajectory batches,
//! run the aggregation/fusion chain forward and backward, train on
//! synthetic corpora, and serve detections streaming or in batch.
//!
//! Parameter names are stable across checkpoints: `radar.*`, `goa.*`,
//! `lga.*`, `mstr_g.*`, `mstr_l.*`, `fuse.*`, `head.*`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregation::{
    goa_frame, goa_frame_backward, init_goa_params, init_lga_params, init_mstr_params, lga_backward,
    lga_frame, mstr, mstr_backward, Candidate, GoaCtx, LgaConfig, LgaCtx, MstrCtx, TrajSlot,
    TrajectoryBatch, MAX_CANDIDATES_PER_SLOT,
};
use crate::features::FeatureError;
use crate::fusion::{
    assign_targets, cbr_backward, decode_detections, detection_loss, fuse_cbr, head_backward,
    head_forward, init_cbr_params, init_head_params, nms_bev, reproject, reproject_backward,
    AnchorConfig, AnchorError, CbrCtx, HeadCtx, HeadOut, LossBreakdown, LossWeights, ReprojectCtx,
};
use crate::geometry::{box_to_bev_index, BevGridSpec, BevIndex, Box3D, GeometryError};
use crate::harness::eval::{evaluate_ap, ApReport, EvalRegion, DEFAULT_IOU_THR};
use crate::harness::io::TrackSnap;
use crate::harness::scenario::{generate_frame, ScenarioSpec};
use crate::harness::HarnessError;
use crate::memory::{FrameRecord, MemoryBank, MemoryError};
use crate::numerics::optim::{AdamW, AdamWConfig};
use crate::numerics::{xavier_uniform, DenseArray, NumericsError, ParamBundle};
use crate::radar::{encode_radar, encode_radar_backward, RadarEncodeCtx, RADAR_POINT_FEATURES};
use crate::tracker::{TrackError, Tracker, TrackerConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub grid: BevGridSpec,
    pub c_global: usize,
    pub c_local: usize,
    /// Memory-bank window length n.
    pub window: usize,
    pub mstr_heads: usize,
    pub lga: LgaConfig,
    pub anchors: AnchorConfig,
    pub use_pe: bool,
    pub use_te: bool,
    /// When a track has no matched detection in a frame, fall back to its
    /// predicted cell for feature sampling instead of masking the slot.
    pub use_predicted_slots: bool,
    pub loss: LossWeights,
    pub score_thr: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: BevGridSpec::new(0.0, 51.2, -25.6, 25.6, 1.6, 1.6).expect("default grid"),
            c_global: 16,
            c_local: 8,
            window: 5,
            mstr_heads: 4,
            lga: LgaConfig::default(),
            anchors: AnchorConfig::default(),
            use_pe: true,
            use_te: true,
            use_predicted_slots: true,
            loss: LossWeights::default(),
            score_thr: 0.2,
            nms_iou: 0.2,
            max_dets: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Invalid(m));
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.use_pe && (!self.c_global.is_multiple_of(4) || self.c_global < 4) {
            return bad(format!(
                "positional encoding needs a multiple of 4 global channels, got {}",
                self.c_global
            ));
        }
        if self.mstr_heads == 0 || !self.c_global.is_multiple_of(self.mstr_heads) {
            return bad(format!(
                "{} temporal heads must divide {} global channels",
                self.mstr_heads, self.c_global
            ));
        }
        if self.lga.heads == 0 || !self.c_local.is_multiple_of(self.lga.heads) {
            return bad(format!(
                "{} deformable heads must divide {} local channels",
                self.lga.heads, self.c_local
            ));
        }
        if !(0.0..=1.0).contains(&self.score_thr) || self.nms_iou <= 0.0 || self.max_dets == 0 {
            return bad("bad decode settings".into());
        }
        self.anchors.validate()?;
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamBundle,
}

impl Model {
    /// Registers every parameter with a seeded initialization: zero-init
    /// offset/attention layers, focal-friendly objectness bias, Xavier
    /// everywhere else.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamBundle::new();
        let (c_g, c_l) = (cfg.c_global, cfg.c_local);
        params.register(
            "radar.w",
            xavier_uniform(&[RADAR_POINT_FEATURES, c_g], RADAR_POINT_FEATURES, c_g, &mut rng),
            true,
        );
        params.register("radar.b", DenseArray::zeros(&[c_g]), true);
        init_goa_params(&mut params, "goa", c_g, &mut rng);
        init_lga_params(&mut params, "lga", c_g, c_l, &cfg.lga, &mut rng);
        init_mstr_params(&mut params, "mstr_g", c_g, &mut rng);
        // The local branch is projected back to global width before pooling.
        init_mstr_params(&mut params, "mstr_l", c_g, &mut rng);
        init_cbr_params(&mut params, "fuse", 3 * c_g, c_g, &mut rng);
        init_head_params(&mut params, "head", c_g, cfg.anchors.num_anchors(), &mut rng);
        Ok(Self { cfg, params })
    }
}

/// Runs the tracker over a full recording and snapshots every live track
/// after every frame: posterior box (prediction when unmatched), reference
/// detection, candidate set.
pub fn run_tracker(
    records: &[Arc<FrameRecord>],
    cfg: &TrackerConfig,
) -> Result<Vec<TrackSnap>, PipelineError> {
    let mut tracker = Tracker::new(*cfg);
    let mut snaps = Vec::new();
    for rec in records {
        tracker.step(rec.frame_id, &rec.dets, &rec.indexes)?;
        let mut frame: Vec<TrackSnap> = tracker
            .tracks
            .iter()
            .map(|t| {
                Ok(TrackSnap {
                    track_id: t.id,
                    frame_id: rec.frame_id,
                    posterior: t.current_box()?,
                    ref_det: t.ref_at(rec.frame_id).map(|r| r.det_idx),
                    cands: t
                        .cands_at(rec.frame_id)
                        .map(|c| c.entries.iter().map(|e| (e.det_idx, e.score)).collect())
                        .unwrap_or_default(),
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        frame.sort_by_key(|s| s.track_id);
        snaps.append(&mut frame);
    }
    Ok(snaps)
}

/// Assembles the batch for one window: one row per track alive at the
/// newest frame, slots filled from its matched detections, falling back to
/// predicted cells when configured. The write-back cell is the posterior at
/// the newest frame, so coasting tracks land where the filter says.
pub fn build_trajectory_batch(
    snaps: &[TrackSnap],
    window: &[Arc<FrameRecord>],
    grid: &BevGridSpec,
    use_predicted_slots: bool,
) -> Result<TrajectoryBatch, PipelineError> {
    if window.is_empty() {
        return Err(PipelineError::Invalid("empty frame window".into()));
    }
    let frame_ids: Vec<u64> = window.iter().map(|r| r.frame_id).collect();
    let newest = *frame_ids.last().expect("non-empty");
    let frame_pos: BTreeMap<u64, usize> =
        frame_ids.iter().enumerate().map(|(i, &f)| (f, i)).collect();

    let mut by_track: BTreeMap<u64, BTreeMap<u64, &TrackSnap>> = BTreeMap::new();
    for s in snaps {
        if frame_pos.contains_key(&s.frame_id) {
            by_track.entry(s.track_id).or_default().insert(s.frame_id, s);
        }
    }

    let n = frame_ids.len();
    let mut track_ids = Vec::new();
    let mut slots = Vec::new();
    let mut current_index = Vec::new();
    for (&id, frames) in &by_track {
        let Some(at_newest) = frames.get(&newest) else { continue };
        track_ids.push(id);
        current_index.push(box_to_bev_index(&at_newest.posterior, grid));
        let mut row = vec![TrajSlot { reference: None, candidates: Vec::new() }; n];
        for (&f, snap) in frames {
            let t = frame_pos[&f];
            let rec = &window[t];
            let mut candidates = Vec::with_capacity(snap.cands.len().min(MAX_CANDIDATES_PER_SLOT));
            for &(det, score) in snap.cands.iter().take(MAX_CANDIDATES_PER_SLOT) {
                let index = *rec.indexes.get(det).ok_or_else(|| {
                    PipelineError::Invalid(format!(
                        "track {id} references detection {det} of {} in frame {f}",
                        rec.indexes.len()
                    ))
                })?;
                candidates.push(Candidate { index, score });
            }
            let mut reference = match snap.ref_det {
                Some(det) => Some(*rec.indexes.get(det).ok_or_else(|| {
                    PipelineError::Invalid(format!(
                        "track {id} references detection {det} of {} in frame {f}",
                        rec.indexes.len()
                    ))
                })?),
                None => None,
            };
            if use_predicted_slots {
                let predicted = box_to_bev_index(&snap.posterior, grid);
                if candidates.is_empty() {
                    candidates.push(Candidate { index: predicted, score: snap.posterior.score });
                }
                if reference.is_none() {
                    reference = Some(predicted);
                }
            }
            row[t] = TrajSlot { reference, candidates };
        }
        slots.extend(row);
    }
    Ok(TrajectoryBatch::new(track_ids, frame_ids, slots, current_index)?)
}

/// Everything the backward pass needs from one forward evaluation.
pub struct PassCtx {
    radar: Vec<RadarEncodeCtx>,
    radar_shape: Vec<usize>,
    goa: Vec<Option<GoaCtx>>,
    lga: Vec<Option<LgaCtx>>,
    mstr_g: MstrCtx,
    mstr_l: MstrCtx,
    reproj_g: ReprojectCtx,
    reproj_l: ReprojectCtx,
    cbr: Option<CbrCtx>,
    head: HeadCtx,
    num_traj: usize,
    window: usize,
}

/// Full second-stage forward pass over one window. `train` switches batch
/// normalization to batch statistics and captures the fusion context.
pub fn forward(
    model: &mut Model,
    window: &[Arc<FrameRecord>],
    batch: &TrajectoryBatch,
    train: bool,
) -> Result<(HeadOut, PassCtx), PipelineError> {
    let cfg = &model.cfg;
    let n = window.len();
    if n == 0 || n != batch.window() {
        return Err(PipelineError::Invalid(format!(
            "window of {n} frames against a batch spanning {}",
            batch.window()
        )));
    }
    for (rec, &f) in window.iter().zip(batch.frame_ids()) {
        if rec.frame_id != f {
            return Err(PipelineError::Invalid(format!(
                "window frame {} does not match batch frame {f}",
                rec.frame_id
            )));
        }
    }
    let grid = window[n - 1].global.grid;
    let c_g = cfg.c_global;
    let r_traj = batch.num_traj();

    let mut radar_maps = Vec::with_capacity(n);
    let mut radar_ctxs = Vec::with_capacity(n);
    for rec in window {
        let (map, ctx) = encode_radar(&rec.radar, &rec.global.grid, &model.params, "radar")?;
        radar_maps.push(map);
        radar_ctxs.push(ctx);
    }

    let mask_g = batch.global_mask();
    let mut seq_g = DenseArray::zeros(&[r_traj, c_g, n]);
    let mut goa_ctxs: Vec<Option<GoaCtx>> = (0..r_traj * n).map(|_| None).collect();
    for r in 0..r_traj {
        for t in 0..n {
            let slot = batch.slot(r, t);
            if !slot.global_valid() {
                continue;
            }
            let (gf, ctx) = goa_frame(
                &window[t].global,
                Some(&radar_maps[t]),
                &slot.candidates,
                &model.params,
                "goa",
                cfg.use_pe,
            )?;
            for c in 0..c_g {
                seq_g.set3(r, c, t, gf.feature[c]);
            }
            goa_ctxs[r * n + t] = Some(ctx);
        }
    }
    let (rows_g, mstr_g_ctx) =
        mstr(&seq_g, &mask_g, &model.params, "mstr_g", cfg.mstr_heads, cfg.use_te)?;

    let mask_l = batch.local_mask();
    let mut seq_l = DenseArray::zeros(&[r_traj, c_g, n]);
    let mut lga_ctxs: Vec<Option<LgaCtx>> = (0..r_traj * n).map(|_| None).collect();
    for r in 0..r_traj {
        for t in 0..n {
            let slot = batch.slot(r, t);
            let Some(reference) = slot.reference else { continue };
            if !slot.local_valid() {
                continue;
            }
            let (feat, ctx) = lga_frame(
                &window[t].local,
                &window[t].global,
                &reference,
                &cfg.lga,
                &model.params,
                "lga",
            )?;
            for c in 0..c_g {
                seq_l.set3(r, c, t, feat[c]);
            }
            lga_ctxs[r * n + t] = Some(ctx);
        }
    }
    let (rows_l, mstr_l_ctx) =
        mstr(&seq_l, &mask_l, &model.params, "mstr_l", cfg.mstr_heads, cfg.use_te)?;

    let current: Vec<BevIndex> = (0..r_traj).map(|r| batch.current_index(r)).collect();
    let (f_s_global, reproj_g) = reproject(&rows_g, &current, &grid)?;
    let (f_s_local, reproj_l) = reproject(&rows_l, &current, &grid)?;

    let (fused, cbr_ctx) = fuse_cbr(
        &f_s_local,
        &f_s_global,
        &window[n - 1].global,
        &mut model.params,
        "fuse",
        train,
    )?;
    let (out, head_ctx) = head_forward(&fused, &model.params, "head")?;
    Ok((
        out,
        PassCtx {
            radar: radar_ctxs,
            radar_shape: vec![c_g, grid.height, grid.width],
            goa: goa_ctxs,
            lga: lga_ctxs,
            mstr_g: mstr_g_ctx,
            mstr_l: mstr_l_ctx,
            reproj_g,
            reproj_l,
            cbr: cbr_ctx,
            head: head_ctx,
            num_traj: r_traj,
            window: n,
        },
    ))
}

fn channel_block(x: &DenseArray, from: usize, count: usize) -> DenseArray {
    let (h, w) = (x.dim(1), x.dim(2));
    let mut out = DenseArray::zeros(&[count, h, w]);
    let plane = h * w;
    out.data_mut().copy_from_slice(&x.data()[from * plane..(from + count) * plane]);
    out
}

/// Accumulates gradients for every parameter from the head back to the
/// radar encoder. Requires a training-mode forward context.
pub fn backward(
    model: &mut Model,
    ctx: &PassCtx,
    grads: &crate::fusion::LossGrads,
) -> Result<(), PipelineError> {
    let c_g = model.cfg.c_global;
    let (r_traj, n) = (ctx.num_traj, ctx.window);
    let g_fused =
        head_backward(&ctx.head, &grads.cls, &grads.boxes, &grads.dir, &mut model.params, "head")?;
    let cbr = ctx
        .cbr
        .as_ref()
        .ok_or_else(|| PipelineError::Invalid("backward needs a training-mode forward".into()))?;
    let g_concat = cbr_backward(cbr, &g_fused, &mut model.params, "fuse")?;
    let g_s_local = channel_block(&g_concat, 0, c_g);
    let g_s_global = channel_block(&g_concat, c_g, c_g);
    // The current-frame block is an input, not a parameter path.

    let g_rows_l = reproject_backward(&ctx.reproj_l, &g_s_local);
    let g_seq_l = mstr_backward(&ctx.mstr_l, &g_rows_l, &mut model.params, "mstr_l")?;
    for r in 0..r_traj {
        for t in 0..n {
            if let Some(lctx) = &ctx.lga[r * n + t] {
                let grad: Vec<f64> = (0..c_g).map(|c| g_seq_l.at3(r, c, t)).collect();
                lga_backward(lctx, &grad, &mut model.params, "lga")?;
            }
        }
    }

    let g_rows_g = reproject_backward(&ctx.reproj_g, &g_s_global);
    let g_seq_g = mstr_backward(&ctx.mstr_g, &g_rows_g, &mut model.params, "mstr_g")?;
    let mut g_radar: Vec<DenseArray> =
        (0..n).map(|_| DenseArray::zeros(&ctx.radar_shape)).collect();
    for r in 0..r_traj {
        for t in 0..n {
            if let Some(gctx) = &ctx.goa[r * n + t] {
                let grad: Vec<f64> = (0..c_g).map(|c| g_seq_g.at3(r, c, t)).collect();
                goa_frame_backward(gctx, &grad, &mut model.params, "goa", Some(&mut g_radar[t]))?;
            }
        }
    }
    for t in 0..n {
        encode_radar_backward(&ctx.radar[t], &g_radar[t], &mut model.params, "radar")?;
    }
    Ok(())
}

/// Decode, threshold, and class-aware NMS.
pub fn detect(model: &Model, out: &HeadOut, grid: &BevGridSpec) -> Result<Vec<Box3D>, PipelineError> {
    let dets = decode_detections(out, &model.cfg.anchors, grid, model.cfg.score_thr)?;
    Ok(nms_bev(dets, model.cfg.nms_iou, model.cfg.max_dets))
}

/// Online inference: frames arrive one at a time, the FIFO bank keeps the
/// window, and each push yields the refined detections for that frame.
pub struct StreamingPipeline {
    tracker: Tracker,
    bank: MemoryBank,
    snaps: Vec<TrackSnap>,
}

impl StreamingPipeline {
    pub fn new(tracker_cfg: TrackerConfig, window: usize) -> Result<Self, PipelineError> {
        Ok(Self {
            tracker: Tracker::new(tracker_cfg),
            bank: MemoryBank::new(window)?,
            snaps: Vec::new(),
        })
    }

    pub fn push(
        &mut self,
        model: &mut Model,
        rec: FrameRecord,
    ) -> Result<Vec<Box3D>, PipelineError> {
        self.tracker.step(rec.frame_id, &rec.dets, &rec.indexes)?;
        let frame_id = rec.frame_id;
        let mut frame: Vec<TrackSnap> = self
            .tracker
            .tracks
            .iter()
            .map(|t| {
                Ok(TrackSnap {
                    track_id: t.id,
                    frame_id,
                    posterior: t.current_box()?,
                    ref_det: t.ref_at(frame_id).map(|r| r.det_idx),
                    cands: t
                        .cands_at(frame_id)
                        .map(|c| c.entries.iter().map(|e| (e.det_idx, e.score)).collect())
                        .unwrap_or_default(),
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        frame.sort_by_key(|s| s.track_id);
        self.snaps.append(&mut frame);

        self.bank.push(Arc::new(rec))?;
        let window = self.bank.window()?;
        let oldest = window[0].frame_id;
        self.snaps.retain(|s| s.frame_id >= oldest);

        let grid = window[window.len() - 1].global.grid;
        let batch = build_trajectory_batch(
            &self.snaps,
            &window,
            &grid,
            model.cfg.use_predicted_slots,
        )?;
        let (out, _) = forward(model, &window, &batch, false)?;
        detect(model, &out, &grid)
    }
}

/// Offline inference over a full recording; per frame, identical to the
/// streaming path by construction.
pub fn batch_infer(
    model: &mut Model,
    tracker_cfg: &TrackerConfig,
    records: &[Arc<FrameRecord>],
    window: usize,
) -> Result<Vec<Vec<Box3D>>, PipelineError> {
    if window == 0 {
        return Err(PipelineError::Invalid("window must be at least 1".into()));
    }
    let snaps = run_tracker(records, tracker_cfg)?;
    let mut all = Vec::with_capacity(records.len());
    for t in 0..records.len() {
        let lo = (t + 1).saturating_sub(window);
        let win = &records[lo..=t];
        let grid = win[win.len() - 1].global.grid;
        let in_win: Vec<TrackSnap> = snaps
            .iter()
            .filter(|s| s.frame_id >= win[0].frame_id && s.frame_id <= win[win.len() - 1].frame_id)
            .cloned()
            .collect();
        let batch =
            build_trajectory_batch(&in_win, win, &grid, model.cfg.use_predicted_slots)?;
        let (out, _) = forward(model, win, &batch, false)?;
        all.push(detect(model, &out, &grid)?);
    }
    Ok(all)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optim: AdamWConfig,
    /// Train on every `frame_stride`-th full window of each scenario.
    pub frame_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 18, optim: AdamWConfig::default(), frame_stride: 3 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains the second stage. Frames, tracking, and targets are regenerated
/// deterministically per scenario, so nothing large stays resident.
pub fn train_on_scenarios(
    model: &mut Model,
    tracker_cfg: &TrackerConfig,
    scenarios: &[ScenarioSpec],
    tc: &TrainConfig,
) -> Result<TrainStats, PipelineError> {
    if tc.frame_stride == 0 {
        return Err(PipelineError::Invalid("frame stride must be at least 1".into()));
    }
    let n = model.cfg.window;
    let mut opt = AdamW::new(tc.optim.clone());
    let mut stats = TrainStats::default();
    for _epoch in 0..tc.epochs {
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for spec in scenarios {
            let mut records = Vec::with_capacity(spec.frames as usize);
            let mut truths = Vec::with_capacity(spec.frames as usize);
            for t in 0..spec.frames {
                let (rec, truth) = generate_frame(spec, t)?;
                records.push(Arc::new(rec));
                truths.push(truth);
            }
            let snaps = run_tracker(&records, tracker_cfg)?;
            let mut t = n.saturating_sub(1);
            while t < records.len() {
                let b = train_step(model, tracker_cfg, &records, &snaps, &truths, t, &mut opt)?;
                loss_sum += b.total;
                steps += 1;
                t += tc.frame_stride;
            }
        }
        stats.epoch_loss.push(if steps == 0 { 0.0 } else { loss_sum / steps as f64 });
    }
    Ok(stats)
}

fn train_step(
    model: &mut Model,
    _tracker_cfg: &TrackerConfig,
    records: &[Arc<FrameRecord>],
    snaps: &[TrackSnap],
    truths: &[crate::harness::scenario::FrameTruth],
    t: usize,
    opt: &mut AdamW,
) -> Result<LossBreakdown, PipelineError> {
    let n = model.cfg.window;
    let lo = (t + 1).saturating_sub(n);
    let win = &records[lo..=t];
    let grid = win[win.len() - 1].global.grid;
    let in_win: Vec<TrackSnap> = snaps
        .iter()
        .filter(|s| s.frame_id >= win[0].frame_id && s.frame_id <= win[win.len() - 1].frame_id)
        .cloned()
        .collect();
    let batch = build_trajectory_batch(&in_win, win, &grid, model.cfg.use_predicted_slots)?;
    let (out, ctx) = forward(model, win, &batch, true)?;
    let targets = assign_targets(&model.cfg.anchors, &grid, &truths[t].gts)?;
    let (breakdown, grads) = detection_loss(&out, &targets, &model.cfg.loss)?;
    model.params.zero_grads();
    backward(model, &ctx, &grads)?;
    opt.step(&mut model.params);
    Ok(breakdown)
}

/// Inference + AP over a scenario list; frames from different scenarios are
/// kept apart by concatenating along the frame axis.
pub fn evaluate_scenarios(
    model: &mut Model,
    tracker_cfg: &TrackerConfig,
    scenarios: &[ScenarioSpec],
    window: usize,
    region: &EvalRegion,
) -> Result<ApReport, PipelineError> {
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    for spec in scenarios {
        let mut records = Vec::with_capacity(spec.frames as usize);
        let mut gts = Vec::with_capacity(spec.frames as usize);
        for t in 0..spec.frames {
            let (rec, truth) = generate_frame(spec, t)?;
            records.push(Arc::new(rec));
            gts.push(truth.gts);
        }
        let dets = batch_infer(model, tracker_cfg, &records, window)?;
        all_dets.extend(dets);
        all_gts.extend(gts);
    }
    Ok(evaluate_ap(&all_dets, &all_gts, &DEFAULT_IOU_THR, region)?)
}

/// mAP as a function of window length, in ascending n.
pub fn ablate_frames(
    model: &mut Model,
    tracker_cfg: &TrackerConfig,
    scenarios: &[ScenarioSpec],
    windows: &[usize],
    region: &EvalRegion,
) -> Result<Vec<(usize, f64)>, PipelineError> {
    let mut rows = Vec::with_capacity(windows.len());
    for &n in windows {
        let report = evaluate_scenarios(model, tracker_cfg, scenarios, n, region)?;
        rows.push((n, report.map));
    }
    Ok(rows)
}

const CKPT_MAGIC: &[u8; 4] = b"M3CK";
const CKPT_VERSION: u16 = 1;

/// Checkpoint: every parameter (including untrainable running statistics)
/// with names, shapes, and a CRC32 trailer.
pub fn checkpoint_bytes(params: &ParamBundle) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, entry) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(entry.trainable as u8);
        buf.extend_from_slice(&(entry.value.shape().len() as u32).to_le_bytes());
        for &d in entry.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in entry.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut h = crc32fast::Hasher::new();
    h.update(&buf);
    let crc = h.finalize();
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_checkpoint(path: &std::path::Path, params: &ParamBundle) -> Result<(), PipelineError> {
    std::fs::write(path, checkpoint_bytes(params)).map_err(HarnessError::Io)?;
    Ok(())
}

/// Loads a checkpoint into an existing model; every name and shape must
/// match the registered parameter set exactly.
pub fn load_checkpoint(path: &std::path::Path, params: &mut ParamBundle) -> Result<(), PipelineError> {
    let buf = std::fs::read(path).map_err(HarnessError::Io)?;
    checkpoint_from_bytes(&buf, params)
}

pub fn checkpoint_from_bytes(buf: &[u8], params: &mut ParamBundle) -> Result<(), PipelineError> {
    if buf.len() < 10 {
        return Err(HarnessError::Truncated.into());
    }
    if &buf[..4] != CKPT_MAGIC {
        return Err(HarnessError::BadMagic.into());
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let mut h = crc32fast::Hasher::new();
    h.update(body);
    if h.finalize() != stored {
        return Err(HarnessError::BadChecksum.into());
    }
    let mut pos = 4usize;
    let take = |pos: &mut usize, k: usize| -> Result<&[u8], PipelineError> {
        if *pos + k > body.len() {
            return Err(HarnessError::Truncated.into());
        }
        let s = &body[*pos..*pos + k];
        *pos += k;
        Ok(s)
    };
    let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2 bytes"));
    if version != CKPT_VERSION {
        return Err(HarnessError::BadVersion(version).into());
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    if count != params.len() {
        return Err(PipelineError::Invalid(format!(
            "checkpoint has {count} parameters, model has {}",
            params.len()
        )));
    }
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| PipelineError::Invalid("parameter name is not UTF-8".into()))?;
        let trainable = take(&mut pos, 1)?[0] != 0;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")));
        }
        let entry = params.get_mut(&name)?;
        if entry.value.shape() != shape.as_slice() || entry.trainable != trainable {
            return Err(PipelineError::Invalid(format!(
                "checkpoint parameter {name:?} does not match the model layout"
            )));
        }
        entry.value = DenseArray::from_vec(&shape, data);
    }
    if pos != body.len() {
        return Err(HarnessError::Truncated.into());
    }
    Ok(())
}
