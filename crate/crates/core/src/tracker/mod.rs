//! Streaming multi-object tracker. Each frame: predict every track,
//! associate predictions with detections by volumetric GIoU and a
//! minimum-cost assignment, update matched filters, and spawn tracks from
//! unmatched detections. Beside the single reference match, every track
//! keeps the surrounding high-overlap detections as candidates.

pub mod hungarian;
pub mod kalman;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{giou3d, BevIndex, Box3D, GeometryError};
use kalman::{KalmanConfig, KalmanState};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("frame {got} is not newer than frame {last}")]
    OutOfOrderFrame { last: u64, got: u64 },
    #[error("{dets} detections but {indexes} grid indexes")]
    LengthMismatch { dets: usize, indexes: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("track state became non-finite")]
    NonFiniteState,
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssociationConfig {
    /// Pairs below this GIoU cannot form reference matches.
    pub giou_thr_low: f64,
    /// Detections above this GIoU join a track's candidate set.
    pub giou_thr_high: f64,
    /// Detections below this score are ignored entirely.
    pub score_thr: f64,
    /// Candidate set size cap per track per frame.
    pub max_candidates: usize,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self { giou_thr_low: 0.0, giou_thr_high: 0.3, score_thr: 0.1, max_candidates: 5 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub assoc: AssociationConfig,
    pub kalman: KalmanConfig,
    /// Frame period in seconds.
    pub dt: f64,
    /// Tracks are dropped after this many consecutive missed frames.
    pub retire_misses: u32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            assoc: AssociationConfig::default(),
            kalman: KalmanConfig::default(),
            dt: 0.1,
            retire_misses: 10,
        }
    }
}

/// Result of associating predicted tracks with one frame of detections.
/// Indices are positions in the inputs, not track ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Association {
    /// (track slot, detection index), at most one per track and detection.
    pub ref_matches: Vec<(usize, usize)>,
    /// Per track slot: detection indices sorted by score descending.
    pub cand_sets: Vec<Vec<usize>>,
    /// Detections in no reference match, ascending.
    pub unmatched_dets: Vec<usize>,
}

const GATE_COST: f64 = 1e6;

/// Association on a precomputed GIoU matrix (tracks x detections).
pub fn associate_from_matrix(
    giou: &[Vec<f64>],
    scores: &[f64],
    cfg: &AssociationConfig,
) -> Result<Association, TrackError> {
    let t = giou.len();
    let d = scores.len();
    let cost = |r: usize, c: usize| {
        let g = giou[r][c];
        if g < cfg.giou_thr_low {
            GATE_COST
        } else {
            -g
        }
    };
    let pairs = hungarian::hungarian(t, d, cost)?;
    let mut ref_matches: Vec<(usize, usize)> =
        pairs.into_iter().filter(|&(r, c)| cost(r, c) < GATE_COST).collect();
    ref_matches.sort_unstable();

    let mut cand_sets = vec![Vec::new(); t];
    for (slot, set) in cand_sets.iter_mut().enumerate() {
        let mut cands: Vec<usize> =
            (0..d).filter(|&j| giou[slot][j] > cfg.giou_thr_high).collect();
        let ref_det = ref_matches.iter().find(|&&(r, _)| r == slot).map(|&(_, c)| c);
        if let Some(rd) = ref_det {
            if !cands.contains(&rd) {
                cands.push(rd);
            }
        }
        // Score-descending order with index as tie-break.
        cands.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
        });
        if cands.len() > cfg.max_candidates {
            // Truncate to the cap but never drop the reference detection.
            let keep_ref = ref_det.filter(|rd| {
                cands.iter().position(|c| c == rd).unwrap() >= cfg.max_candidates
            });
            cands.truncate(cfg.max_candidates);
            if let Some(rd) = keep_ref {
                cands.pop();
                cands.push(rd);
                cands.sort_by(|&a, &b| {
                    scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
                });
            }
        }
        *set = cands;
    }

    let unmatched_dets =
        (0..d).filter(|j| !ref_matches.iter().any(|&(_, c)| c == *j)).collect();
    Ok(Association { ref_matches, cand_sets, unmatched_dets })
}

/// Builds the GIoU matrix between predicted track boxes and detections and
/// associates them.
pub fn associate(
    predicted: &[Box3D],
    dets: &[Box3D],
    cfg: &AssociationConfig,
) -> Result<Association, TrackError> {
    let mut giou = vec![vec![0.0; dets.len()]; predicted.len()];
    for (r, p) in predicted.iter().enumerate() {
        for (c, dbox) in dets.iter().enumerate() {
            giou[r][c] = giou3d(p, dbox)?;
        }
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    associate_from_matrix(&giou, &scores, cfg)
}

/// Reference-trajectory entry: the detection this track matched in a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefEntry {
    pub frame_id: u64,
    pub det_idx: usize,
    pub index: BevIndex,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandEntry {
    pub det_idx: usize,
    pub index: BevIndex,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameCandidates {
    pub frame_id: u64,
    pub entries: Vec<CandEntry>,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub cls: u32,
    pub state: KalmanState,
    pub hits: u32,
    pub misses: u32,
    pub last_score: f64,
    pub refs: Vec<RefEntry>,
    pub cands: Vec<FrameCandidates>,
}

impl Track {
    fn spawn(id: u64, det: &Box3D, cfg: &KalmanConfig) -> Self {
        Self {
            id,
            cls: det.cls,
            state: KalmanState::from_detection(det, cfg),
            hits: 1,
            misses: 0,
            last_score: det.score,
            refs: Vec::new(),
            cands: Vec::new(),
        }
    }

    pub fn current_box(&self) -> Result<Box3D, TrackError> {
        self.state.to_box(self.cls, self.last_score)
    }

    pub fn ref_at(&self, frame_id: u64) -> Option<&RefEntry> {
        self.refs.iter().find(|r| r.frame_id == frame_id)
    }

    pub fn cands_at(&self, frame_id: u64) -> Option<&FrameCandidates> {
        self.cands.iter().find(|c| c.frame_id == frame_id)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepSummary {
    /// (track id, detection index) reference matches applied this frame.
    pub matched: Vec<(u64, usize)>,
    pub spawned: Vec<u64>,
    pub retired: Vec<u64>,
}

#[derive(Debug)]
pub struct Tracker {
    pub cfg: TrackerConfig,
    pub tracks: Vec<Track>,
    next_id: u64,
    last_frame: Option<u64>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self { cfg, tracks: Vec::new(), next_id: 0, last_frame: None }
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    /// Advances the tracker by one frame. `indexes` must align with `dets`.
    pub fn step(
        &mut self,
        frame_id: u64,
        dets: &[Box3D],
        indexes: &[BevIndex],
    ) -> Result<StepSummary, TrackError> {
        if dets.len() != indexes.len() {
            return Err(TrackError::LengthMismatch { dets: dets.len(), indexes: indexes.len() });
        }
        if let Some(last) = self.last_frame {
            if frame_id <= last {
                return Err(TrackError::OutOfOrderFrame { last, got: frame_id });
            }
        }
        let keep: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].score >= self.cfg.assoc.score_thr)
            .collect();
        let fdets: Vec<Box3D> = keep.iter().map(|&i| dets[i]).collect();

        for track in &mut self.tracks {
            kalman::predict(&mut track.state, self.cfg.dt, &self.cfg.kalman)?;
        }
        let predicted: Vec<Box3D> =
            self.tracks.iter().map(|t| t.current_box()).collect::<Result<_, _>>()?;
        let assoc = associate(&predicted, &fdets, &self.cfg.assoc)?;

        let mut summary = StepSummary::default();
        let mut matched_slots = vec![false; self.tracks.len()];
        for &(slot, fdi) in &assoc.ref_matches {
            let di = keep[fdi];
            let track = &mut self.tracks[slot];
            kalman::update(&mut track.state, &dets[di], &self.cfg.kalman)?;
            track.hits += 1;
            track.misses = 0;
            track.last_score = dets[di].score;
            track.refs.push(RefEntry { frame_id, det_idx: di, index: indexes[di] });
            matched_slots[slot] = true;
            summary.matched.push((track.id, di));
        }
        for (slot, set) in assoc.cand_sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let entries: Vec<CandEntry> = set
                .iter()
                .map(|&fdi| {
                    let di = keep[fdi];
                    CandEntry { det_idx: di, index: indexes[di], score: dets[di].score }
                })
                .collect();
            self.tracks[slot].cands.push(FrameCandidates { frame_id, entries });
        }
        for (slot, matched) in matched_slots.iter().enumerate() {
            if !matched {
                self.tracks[slot].misses += 1;
            }
        }
        for &fdi in &assoc.unmatched_dets {
            let di = keep[fdi];
            let mut track = Track::spawn(self.next_id, &dets[di], &self.cfg.kalman);
            self.next_id += 1;
            track.refs.push(RefEntry { frame_id, det_idx: di, index: indexes[di] });
            track
                .cands
                .push(FrameCandidates {
                    frame_id,
                    entries: vec![CandEntry {
                        det_idx: di,
                        index: indexes[di],
                        score: dets[di].score,
                    }],
                });
            summary.spawned.push(track.id);
            self.tracks.push(track);
        }
        let retire = self.cfg.retire_misses;
        summary.retired = self
            .tracks
            .iter()
            .filter(|t| t.misses > retire)
            .map(|t| t.id)
            .collect();
        self.tracks.retain(|t| t.misses <= retire);
        self.last_frame = Some(frame_id);
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGridSpec;

    fn grid() -> BevGridSpec {
        BevGridSpec::new(0.0, 51.2, -25.6, 25.6, 0.4, 0.4).unwrap()
    }

    fn det(x: f64, y: f64, score: f64) -> Box3D {
        Box3D::new(x, y, 0.75, 4.0, 1.8, 1.5, 0.0, 0, score).unwrap()
    }

    fn step_simple(tracker: &mut Tracker, frame: u64, dets: &[Box3D]) -> StepSummary {
        let g = grid();
        let idx: Vec<_> = dets.iter().map(|d| crate::geometry::box_to_bev_index(d, &g)).collect();
        tracker.step(frame, dets, &idx).unwrap()
    }

    #[test]
    fn association_matrix_example() {
        let giou = vec![vec![0.9, 0.2, 0.85], vec![0.1, 0.8, 0.75]];
        let scores = vec![0.9, 0.8, 0.7];
        let cfg = AssociationConfig {
            giou_thr_low: 0.3,
            giou_thr_high: 0.7,
            ..Default::default()
        };
        let assoc = associate_from_matrix(&giou, &scores, &cfg).unwrap();
        assert_eq!(assoc.ref_matches, vec![(0, 0), (1, 1)]);
        assert_eq!(assoc.cand_sets, vec![vec![0, 2], vec![1, 2]]);
        assert_eq!(assoc.unmatched_dets, vec![2]);
    }

    #[test]
    fn gated_pairs_never_match() {
        let giou = vec![vec![-0.5]];
        let assoc = associate_from_matrix(&giou, &[0.9], &AssociationConfig::default()).unwrap();
        assert!(assoc.ref_matches.is_empty());
        assert_eq!(assoc.unmatched_dets, vec![0]);
    }

    #[test]
    fn candidate_cap_keeps_the_reference_detection() {
        // Reference match lands on the lowest-scored detection; five higher
        // scores would otherwise crowd it out.
        let giou = vec![vec![0.95, 0.5, 0.5, 0.5, 0.5, 0.5]];
        let scores = vec![0.1, 0.9, 0.8, 0.7, 0.6, 0.5];
        let cfg = AssociationConfig {
            giou_thr_low: 0.0,
            giou_thr_high: 0.3,
            score_thr: 0.0,
            max_candidates: 5,
        };
        let assoc = associate_from_matrix(&giou, &scores, &cfg).unwrap();
        assert_eq!(assoc.ref_matches, vec![(0, 0)]);
        let set = &assoc.cand_sets[0];
        assert_eq!(set.len(), 5);
        assert!(set.contains(&0));
        for pair in set.windows(2) {
            assert!(scores[pair[0]] >= scores[pair[1]]);
        }
    }

    #[test]
    fn fresh_detections_spawn_sequential_ids() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let dets = vec![det(10.0, 0.0, 0.9), det(20.0, 5.0, 0.8), det(30.0, -5.0, 0.7)];
        let summary = step_simple(&mut tracker, 0, &dets);
        assert_eq!(summary.spawned, vec![0, 1, 2]);
        assert_eq!(tracker.tracks.len(), 3);
        // Spawn frame counts as the first reference entry.
        assert!(tracker.tracks.iter().all(|t| t.refs.len() == 1 && t.cands.len() == 1));
    }

    #[test]
    fn constant_velocity_object_keeps_one_track() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        for f in 0..5u64 {
            let t = f as f64 * 0.1;
            step_simple(&mut tracker, f, &[det(10.0 + 2.0 * t, 0.0, 0.9)]);
        }
        assert_eq!(tracker.tracks.len(), 1);
        let track = &tracker.tracks[0];
        assert_eq!(track.refs.len(), 5);
        let [vx, vy, _] = track.state.velocity();
        assert!((vx - 2.0).abs() < 0.5, "vx {vx}");
        assert!(vy.abs() < 0.2, "vy {vy}");
    }

    #[test]
    fn missed_frames_retire_tracks() {
        let cfg = TrackerConfig { retire_misses: 2, ..TrackerConfig::default() };
        let mut tracker = Tracker::new(cfg);
        step_simple(&mut tracker, 0, &[det(10.0, 0.0, 0.9)]);
        for f in 1..=3u64 {
            let summary = step_simple(&mut tracker, f, &[]);
            if f == 3 {
                assert_eq!(summary.retired, vec![0]);
            }
        }
        assert!(tracker.tracks.is_empty());
    }

    #[test]
    fn below_threshold_scores_are_ignored() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let summary = step_simple(&mut tracker, 0, &[det(10.0, 0.0, 0.05)]);
        assert!(summary.spawned.is_empty());
        assert!(tracker.tracks.is_empty());
    }

    #[test]
    fn out_of_order_frames_error() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        step_simple(&mut tracker, 5, &[det(10.0, 0.0, 0.9)]);
        let g = grid();
        let d = det(10.0, 0.0, 0.9);
        let idx = crate::geometry::box_to_bev_index(&d, &g);
        assert!(matches!(
            tracker.step(5, &[d], &[idx]),
            Err(TrackError::OutOfOrderFrame { .. })
        ));
    }

    #[test]
    fn no_detection_joins_two_reference_matches() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let t = rng.random_range(1..5usize);
            let d = rng.random_range(1..5usize);
            let giou: Vec<Vec<f64>> =
                (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let scores: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
            let assoc =
                associate_from_matrix(&giou, &scores, &AssociationConfig::default()).unwrap();
            let mut seen_d = std::collections::HashSet::new();
            let mut seen_t = std::collections::HashSet::new();
            for &(r, c) in &assoc.ref_matches {
                assert!(seen_t.insert(r));
                assert!(seen_d.insert(c));
                // Matched pairs always appear in the candidate set.
                assert!(assoc.cand_sets[r].contains(&c));
            }
            for set in &assoc.cand_sets {
                assert!(set.len() <= 5);
            }
        }
    }
}
