//! The inference subsystem: per-frame iterative refinement, prediction
//! heads, and the track lifecycle state machine.
//!
//! Association is implicit: every live track contributes its carried
//! embeddings as decoder queries, and the refined outputs update the same
//! track. The network sits behind [`TrackNet`] so the lifecycle logic is
//! fully testable with a scripted stub instead of trained weights.

use crate::diffusion::sample_latent_proposals;
use crate::geom::{iou, BBox};
use crate::ndgrad::Rng;
use crate::nets::{
    ffn_heads, itrn_decode, sfen_extract, EmbeddingSet, FeatureMap, ModelParams, NetError, RowTag,
};
use crate::synthworld::Frame;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("refine requires at least one step")]
    ZeroSteps,
    #[error("track {0} has an empty history")]
    EmptyHistory(u64),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Lifecycle thresholds and ablation knobs.
#[derive(Debug, Clone, Copy)]
pub struct TrackerConfig {
    /// Classification threshold: below deactivates, above reactivates.
    pub sigma_cls: f64,
    /// Overlap threshold: a box overlapping a higher-scoring box above this
    /// is suppressed and its track deactivated.
    pub sigma_iou: f64,
    /// Frames an inactive track is retained for re-identification.
    pub n_reid: usize,
    /// Reverse-refinement passes per frame.
    pub refine_steps: usize,
    /// Carried embeddings per track (1..=5).
    pub history_depth: usize,
    /// Minimum IoU between a track's previous and newly predicted box for
    /// the refined embedding to replace the carried one; below it the
    /// carried embedding is kept (the box still updates). Guards the
    /// embedding recursion against runaway drift. 0 disables the gate.
    pub refresh_gate: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            sigma_cls: 0.4,
            sigma_iou: 0.9,
            n_reid: 5,
            refine_steps: 1,
            history_depth: 1,
            refresh_gate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Active,
    Inactive,
}

/// One person track: persistent identity, lifecycle state, box trajectory,
/// and up to `history_depth` carried embeddings (oldest first).
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub state: TrackState,
    /// Frames spent inactive since deactivation (0 while active).
    pub inactive_count: usize,
    pub box_history: Vec<BBox>,
    pub embedding_history: VecDeque<Vec<f64>>,
    /// Head outputs of the current frame, aligned with embedding slots.
    pub last_predictions: Vec<(BBox, f64)>,
    pub last_score: f64,
}

impl Track {
    fn new(id: u64, bbox: BBox, score: f64, embedding: Vec<f64>) -> Self {
        Track {
            id,
            state: TrackState::Active,
            inactive_count: 0,
            box_history: vec![bbox],
            embedding_history: VecDeque::from([embedding]),
            last_predictions: vec![(bbox, score)],
            last_score: score,
        }
    }

    pub fn is_active(&self) -> bool {
        self.state == TrackState::Active
    }

    pub fn current_box(&self) -> Option<&BBox> {
        self.box_history.last()
    }
}

/// Pick the per-embedding head output with the highest classification
/// score; ties go to the most recent embedding.
pub fn select_history(track: &Track) -> Result<(BBox, f64), TrackerError> {
    if track.last_predictions.is_empty() {
        return Err(TrackerError::EmptyHistory(track.id));
    }
    let mut best = track.last_predictions[0];
    for &(bbox, score) in &track.last_predictions[1..] {
        if score >= best.1 {
            best = (bbox, score);
        }
    }
    Ok(best)
}

/// All live tracks plus the monotone identity counter. Identities are
/// never reissued within a sequence.
#[derive(Debug, Default)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    next_id: u64,
}

impl TrackSet {
    pub fn active(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.is_active())
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.id == id)
    }
}

/// One scored box entering the lifecycle update. Track-sourced predictions
/// carry their identity; noised-sourced spawn candidates do not.
#[derive(Debug, Clone)]
pub struct TrackPrediction {
    pub track_id: Option<u64>,
    pub bbox: BBox,
    pub score: f64,
    pub embedding: Vec<f64>,
}

/// Per-frame output: detections of all active tracks after the update.
#[derive(Debug, Clone)]
pub struct FrameResult {
    pub detections: Vec<(u64, BBox, f64)>,
}

/// Identity and slot metadata for each track-query row fed to the network.
#[derive(Debug, Clone, Copy)]
pub struct QueryRowInfo {
    pub track_id: u64,
    pub slot: usize,
    pub newest: bool,
}

/// Per-row network output for one frame.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// Refined embeddings, noised rows first, tags preserved.
    pub refined: EmbeddingSet,
    /// Person probability per row.
    pub scores: Vec<f64>,
    /// Predicted box per row.
    pub boxes: Vec<BBox>,
}

/// Seam between the lifecycle machine and the learned model.
pub trait TrackNet {
    fn infer(
        &mut self,
        frame: &Frame,
        noised: &EmbeddingSet,
        tracks: &EmbeddingSet,
        track_rows: &[QueryRowInfo],
        steps: usize,
    ) -> Result<NetOutput, TrackerError>;

    fn latent_dim(&self) -> usize;
    fn proposal_count(&self) -> usize;
}

/// Iterative refinement: apply the decoder `steps` times, feeding each
/// pass's noised rows back in while the track rows stay conditioned on
/// their original embeddings. One step reproduces the training-time
/// forward path exactly.
pub fn refine(
    noised: &EmbeddingSet,
    tracks: &EmbeddingSet,
    features: &FeatureMap,
    steps: usize,
    params: &ModelParams,
) -> Result<EmbeddingSet, TrackerError> {
    if steps == 0 {
        return Err(TrackerError::ZeroSteps);
    }
    let n_ns = noised.count();
    let mut current = noised.clone();
    let mut out = itrn_decode(&current, tracks, features, params)?;
    for _ in 1..steps {
        let rows: Vec<Vec<f64>> = (0..n_ns).map(|i| out.row(i).to_vec()).collect();
        current = EmbeddingSet::from_rows(rows, RowTag::Noised);
        out = itrn_decode(&current, tracks, features, params)?;
    }
    Ok(out)
}

/// The trained model behind the [`TrackNet`] seam.
pub struct DiffusionNet {
    pub params: ModelParams,
}

impl TrackNet for DiffusionNet {
    fn infer(
        &mut self,
        frame: &Frame,
        noised: &EmbeddingSet,
        tracks: &EmbeddingSet,
        _track_rows: &[QueryRowInfo],
        steps: usize,
    ) -> Result<NetOutput, TrackerError> {
        let features = sfen_extract(frame, &self.params)?;
        let refined = refine(noised, tracks, &features, steps, &self.params)?;
        let preds = ffn_heads(&refined, &self.params)?;
        let scores = preds.entries.iter().map(|p| p.person_prob()).collect();
        let boxes = preds.entries.iter().map(|p| p.bbox).collect();
        Ok(NetOutput {
            refined,
            scores,
            boxes,
        })
    }

    fn latent_dim(&self) -> usize {
        self.params.config.latent_dim
    }

    fn proposal_count(&self) -> usize {
        self.params.config.n_ns
    }
}

/// Lifecycle update for one frame.
///
/// Track predictions below the classification threshold deactivate their
/// track. Among overlapping boxes, any box overlapping a higher-scoring
/// box above the suppression threshold is dropped (and its track
/// deactivated). Surviving noised candidates above threshold spawn new
/// tracks; surviving inactive-track predictions above threshold reactivate
/// with their old identity. Inactive tracks past the retention budget are
/// removed permanently.
pub fn lifecycle_update(
    tracks: &mut TrackSet,
    predictions: &[TrackPrediction],
    cfg: &TrackerConfig,
) {
    let find = |set: &TrackSet, id: u64| set.tracks.iter().position(|t| t.id == id).unwrap();

    // Threshold pass: low-scoring track predictions deactivate.
    for pred in predictions {
        if let Some(id) = pred.track_id {
            let idx = find(tracks, id);
            let track = &mut tracks.tracks[idx];
            track.last_score = pred.score;
            if track.is_active() && pred.score < cfg.sigma_cls {
                track.state = TrackState::Inactive;
                track.inactive_count = 0; // incremented in the aging pass
            }
        }
    }

    // Suppression pass over every box still in play: active-track
    // predictions, reactivation candidates, and confident spawns.
    #[derive(Clone, Copy)]
    struct Entry {
        pred_idx: usize,
        score: f64,
    }
    let mut entries: Vec<Entry> = Vec::new();
    for (i, pred) in predictions.iter().enumerate() {
        match pred.track_id {
            Some(id) => {
                let track = &tracks.tracks[find(tracks, id)];
                let in_play = match track.state {
                    TrackState::Active => true,
                    TrackState::Inactive => pred.score > cfg.sigma_cls,
                };
                if in_play {
                    entries.push(Entry {
                        pred_idx: i,
                        score: pred.score,
                    });
                }
            }
            None => {
                if pred.score >= cfg.sigma_cls {
                    entries.push(Entry {
                        pred_idx: i,
                        score: pred.score,
                    });
                }
            }
        }
    }
    // Highest score first; track rows win ties over spawns, then input
    // order. Deterministic.
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| {
                let ta = predictions[a.pred_idx].track_id.is_none();
                let tb = predictions[b.pred_idx].track_id.is_none();
                ta.cmp(&tb)
            })
            .then_with(|| a.pred_idx.cmp(&b.pred_idx))
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed: Vec<usize> = Vec::new();
    for e in &entries {
        let b = &predictions[e.pred_idx].bbox;
        let clashes = kept
            .iter()
            .any(|&k| iou(b, &predictions[k].bbox) > cfg.sigma_iou);
        if clashes {
            suppressed.push(e.pred_idx);
        } else {
            kept.push(e.pred_idx);
        }
    }

    for &i in &suppressed {
        if let Some(id) = predictions[i].track_id {
            let idx = find(tracks, id);
            let track = &mut tracks.tracks[idx];
            if track.is_active() {
                track.state = TrackState::Inactive;
                track.inactive_count = 0;
            }
        }
    }

    // Commit survivors: update active tracks, reactivate, spawn.
    let mut refreshed: Vec<u64> = Vec::new();
    for &i in &kept {
        let pred = &predictions[i];
        match pred.track_id {
            Some(id) => {
                let idx = find(tracks, id);
                let track = &mut tracks.tracks[idx];
                let reactivating =
                    track.state == TrackState::Inactive && pred.score > cfg.sigma_cls;
                if reactivating {
                    track.state = TrackState::Active;
                    track.inactive_count = 0;
                }
                if track.is_active() {
                    let stable = cfg.refresh_gate <= 0.0
                        || track
                            .box_history
                            .last()
                            .is_none_or(|prev| iou(prev, &pred.bbox) >= cfg.refresh_gate);
                    track.box_history.push(pred.bbox);
                    if stable {
                        track.embedding_history.push_back(pred.embedding.clone());
                        while track.embedding_history.len() > cfg.history_depth {
                            track.embedding_history.pop_front();
                        }
                    }
                    refreshed.push(id);
                }
            }
            None => {
                let id = tracks.next_id;
                tracks.next_id += 1;
                tracks
                    .tracks
                    .push(Track::new(id, pred.bbox, pred.score, pred.embedding.clone()));
                refreshed.push(id);
            }
        }
    }

    // Aging pass: inactive tracks count their absence; beyond the
    // retention budget they are removed for good.
    let budget = cfg.n_reid;
    tracks.tracks.retain_mut(|t| {
        if t.is_active() || refreshed.contains(&t.id) {
            return true;
        }
        t.inactive_count += 1;
        t.inactive_count <= budget
    });
}

/// One tracker instance per sequence: owns the track set and drives the
/// network each frame.
pub struct Tracker<N: TrackNet> {
    pub net: N,
    pub cfg: TrackerConfig,
    pub tracks: TrackSet,
}

impl<N: TrackNet> Tracker<N> {
    pub fn new(net: N, cfg: TrackerConfig) -> Self {
        Tracker {
            net,
            cfg,
            tracks: TrackSet::default(),
        }
    }

    /// Process one frame: sample proposals in latent space, refine them
    /// conditioned on carried track embeddings, apply the heads, then run
    /// the lifecycle update. Detections list every active track.
    pub fn step(&mut self, frame: &Frame, rng: &mut Rng) -> Result<FrameResult, TrackerError> {
        let dim = self.net.latent_dim();
        let noised = sample_latent_proposals(self.net.proposal_count(), dim, rng);

        let mut track_rows: Vec<QueryRowInfo> = Vec::new();
        let mut track_embs: Vec<Vec<f64>> = Vec::new();
        for track in &self.tracks.tracks {
            let n = track.embedding_history.len();
            for (slot, emb) in track.embedding_history.iter().enumerate() {
                track_rows.push(QueryRowInfo {
                    track_id: track.id,
                    slot,
                    newest: slot + 1 == n,
                });
                track_embs.push(emb.clone());
            }
        }
        let track_set = if track_embs.is_empty() {
            EmbeddingSet::empty(dim)
        } else {
            EmbeddingSet::from_rows(track_embs, RowTag::Track)
        };

        let out = self
            .net
            .infer(frame, &noised, &track_set, &track_rows, self.cfg.refine_steps)?;
        let n_ns = noised.count();

        // Per-track candidates in slot order drive history selection; the
        // newest slot's refined embedding is what carries forward.
        for track in &mut self.tracks.tracks {
            track.last_predictions.clear();
        }
        let mut predictions: Vec<TrackPrediction> = Vec::new();
        for (row, info) in track_rows.iter().enumerate() {
            let global = n_ns + row;
            let idx = self
                .tracks
                .tracks
                .iter()
                .position(|t| t.id == info.track_id)
                .unwrap();
            self.tracks.tracks[idx]
                .last_predictions
                .push((out.boxes[global], out.scores[global]));
        }
        for (row, info) in track_rows.iter().enumerate() {
            if !info.newest {
                continue;
            }
            let global = n_ns + row;
            let track = self.tracks.get(info.track_id).unwrap();
            let (bbox, score) = select_history(track)?;
            let _ = global;
            let newest_row = n_ns + row;
            predictions.push(TrackPrediction {
                track_id: Some(info.track_id),
                bbox,
                score,
                embedding: out.refined.row(newest_row).to_vec(),
            });
        }
        for i in 0..n_ns {
            predictions.push(TrackPrediction {
                track_id: None,
                bbox: out.boxes[i],
                score: out.scores[i],
                embedding: out.refined.row(i).to_vec(),
            });
        }

        lifecycle_update(&mut self.tracks, &predictions, &self.cfg);

        let detections = self
            .tracks
            .active()
            .map(|t| (t.id, *t.current_box().expect("active tracks have boxes"), t.last_score))
            .collect();
        Ok(FrameResult { detections })
    }
}

/// Scripted stub network: per frame, fixed spawn candidates occupying the
/// first noised rows and per-track responses keyed by identity (one
/// response per history slot; the last repeats for deeper histories).
/// This is the injection seam that makes the lifecycle machine testable
/// without trained weights. Unscripted rows score zero.
pub struct ScriptedNet {
    pub frames: Vec<ScriptFrame>,
    pub cursor: usize,
    pub n_ns: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptFrame {
    pub detections: Vec<(BBox, f64)>,
    pub responses: std::collections::BTreeMap<u64, Vec<(BBox, f64)>>,
}

impl ScriptedNet {
    pub fn new(frames: Vec<ScriptFrame>, n_ns: usize, dim: usize) -> Self {
        ScriptedNet {
            frames,
            cursor: 0,
            n_ns,
            dim,
        }
    }
}

impl TrackNet for ScriptedNet {
    fn infer(
        &mut self,
        _frame: &Frame,
        noised: &EmbeddingSet,
        tracks: &EmbeddingSet,
        track_rows: &[QueryRowInfo],
        _steps: usize,
    ) -> Result<NetOutput, TrackerError> {
        let script = self.frames[self.cursor.min(self.frames.len() - 1)].clone();
        self.cursor += 1;
        let n = noised.count() + tracks.count();
        let mut scores = vec![0.0; n];
        let mut boxes = vec![BBox::new(0.5, 0.5, 0.0, 0.0); n];
        for (i, &(bbox, score)) in script.detections.iter().enumerate() {
            if i < noised.count() {
                boxes[i] = bbox;
                scores[i] = score;
            }
        }
        for (row, info) in track_rows.iter().enumerate() {
            let global = noised.count() + row;
            if let Some(responses) = script.responses.get(&info.track_id) {
                let r = responses[info.slot.min(responses.len() - 1)];
                boxes[global] = r.0;
                scores[global] = r.1;
            }
        }
        Ok(NetOutput {
            refined: noised.vstack(tracks),
            scores,
            boxes,
        })
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn proposal_count(&self) -> usize {
        self.n_ns
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Array;
    use std::collections::BTreeMap;

    fn bb(cx: f64, cy: f64) -> BBox {
        BBox::new(cx, cy, 0.15, 0.25)
    }

    fn frame() -> Frame {
        Frame::filled(16, 16, 0.5)
    }

    fn run<N: TrackNet>(tracker: &mut Tracker<N>, frames: usize) -> Vec<FrameResult> {
        let mut rng = Rng::from_seed(1);
        (0..frames)
            .map(|_| tracker.step(&frame(), &mut rng).unwrap())
            .collect()
    }

    fn stay(bbox: BBox, score: f64) -> Vec<(BBox, f64)> {
        vec![(bbox, score)]
    }

    #[test]
    fn first_frame_spawns_confident_detections() {
        let script = vec![ScriptFrame {
            detections: vec![(bb(0.3, 0.3), 0.9), (bb(0.7, 0.7), 0.8)],
            responses: BTreeMap::new(),
        }];
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), TrackerConfig::default());
        let results = run(&mut tracker, 1);
        assert_eq!(results[0].detections.len(), 2);
        let ids: Vec<u64> = results[0].detections.iter().map(|d| d.0).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn low_scores_spawn_nothing() {
        let script = vec![ScriptFrame {
            detections: vec![(bb(0.3, 0.3), 0.39), (bb(0.7, 0.7), 0.1)],
            responses: BTreeMap::new(),
        }];
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), TrackerConfig::default());
        let results = run(&mut tracker, 1);
        assert!(results[0].detections.is_empty());
        assert!(tracker.tracks.is_empty());
    }

    #[test]
    fn gap_within_retention_resumes_identity() {
        // appear, hold, vanish 2 frames, reappear: same identity
        let present = ScriptFrame {
            detections: vec![],
            responses: [(0u64, stay(bb(0.4, 0.4), 0.9))].into(),
        };
        let absent = ScriptFrame {
            detections: vec![],
            responses: [(0u64, stay(bb(0.4, 0.4), 0.05))].into(),
        };
        let script = vec![
            ScriptFrame {
                detections: vec![(bb(0.4, 0.4), 0.9)],
                responses: BTreeMap::new(),
            },
            present.clone(),
            absent.clone(),
            absent.clone(),
            present.clone(),
            present.clone(),
        ];
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), TrackerConfig::default());
        let results = run(&mut tracker, 6);
        assert_eq!(results[1].detections.len(), 1);
        assert!(results[2].detections.is_empty());
        assert!(results[3].detections.is_empty());
        assert_eq!(results[4].detections.len(), 1);
        assert_eq!(results[4].detections[0].0, 0, "identity must resume");
        assert_eq!(tracker.tracks.len(), 1);
    }

    #[test]
    fn gap_beyond_retention_issues_new_identity() {
        let mut cfg = TrackerConfig::default();
        cfg.n_reid = 2;
        let absent = ScriptFrame {
            detections: vec![],
            responses: [(0u64, stay(bb(0.4, 0.4), 0.05))].into(),
        };
        let mut script = vec![ScriptFrame {
            detections: vec![(bb(0.4, 0.4), 0.9)],
            responses: BTreeMap::new(),
        }];
        for _ in 0..3 {
            script.push(absent.clone());
        }
        // reappearance arrives as a fresh confident detection
        script.push(ScriptFrame {
            detections: vec![(bb(0.4, 0.4), 0.9)],
            responses: BTreeMap::new(),
        });
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), cfg);
        let results = run(&mut tracker, 5);
        assert!(results[3].detections.is_empty());
        assert_eq!(tracker.tracks.len(), 1);
        assert_eq!(
            results[4].detections[0].0, 1,
            "a removed identity is never reissued"
        );
    }

    #[test]
    fn nms_deactivates_lower_scoring_overlap() {
        let overlapping = BBox::new(0.5, 0.5, 0.2, 0.3);
        let nearly_same = BBox::new(0.505, 0.5, 0.2, 0.3);
        let script = vec![
            ScriptFrame {
                detections: vec![(bb(0.3, 0.5), 0.9), (bb(0.7, 0.5), 0.85)],
                responses: BTreeMap::new(),
            },
            ScriptFrame {
                detections: vec![],
                responses: [
                    (0u64, stay(overlapping, 0.9)),
                    (1u64, stay(nearly_same, 0.8)),
                ]
                .into(),
            },
        ];
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), TrackerConfig::default());
        let results = run(&mut tracker, 2);
        assert_eq!(results[1].detections.len(), 1);
        assert_eq!(results[1].detections[0].0, 0, "higher score survives");
        let loser = tracker.tracks.get(1).unwrap();
        assert_eq!(loser.state, TrackState::Inactive);
    }

    #[test]
    fn disjoint_confident_predictions_all_retained() {
        let script = vec![
            ScriptFrame {
                detections: vec![(bb(0.2, 0.2), 0.9), (bb(0.5, 0.6), 0.8), (bb(0.8, 0.3), 0.7)],
                responses: BTreeMap::new(),
            },
            ScriptFrame {
                detections: vec![],
                responses: [
                    (0u64, stay(bb(0.2, 0.2), 0.9)),
                    (1u64, stay(bb(0.5, 0.6), 0.8)),
                    (2u64, stay(bb(0.8, 0.3), 0.7)),
                ]
                .into(),
            },
        ];
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), TrackerConfig::default());
        let results = run(&mut tracker, 2);
        assert_eq!(results[1].detections.len(), 3);
    }

    #[test]
    fn inactive_track_removed_after_budget() {
        let mut cfg = TrackerConfig::default();
        cfg.n_reid = 2;
        let absent = ScriptFrame {
            detections: vec![],
            responses: [(0u64, stay(bb(0.4, 0.4), 0.05))].into(),
        };
        let script = vec![
            ScriptFrame {
                detections: vec![(bb(0.4, 0.4), 0.9)],
                responses: BTreeMap::new(),
            },
            absent.clone(),
            absent.clone(),
            absent.clone(),
        ];
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), cfg);
        run(&mut tracker, 3);
        assert_eq!(tracker.tracks.len(), 1, "still retained at the budget");
        assert_eq!(tracker.tracks.tracks[0].inactive_count, 2);
        run_one_more(&mut tracker);
        assert!(tracker.tracks.is_empty(), "removed past the budget");
    }

    fn run_one_more<N: TrackNet>(tracker: &mut Tracker<N>) {
        let mut rng = Rng::from_seed(99);
        tracker.step(&frame(), &mut rng).unwrap();
    }

    #[test]
    fn select_history_passthrough_argmax_and_tie() {
        let mut track = Track::new(3, bb(0.4, 0.4), 0.7, vec![0.0; 4]);
        // depth 1: passthrough
        assert_eq!(select_history(&track).unwrap().1, 0.7);

        track.last_predictions = vec![
            (bb(0.1, 0.1), 0.3),
            (bb(0.2, 0.2), 0.9),
            (bb(0.3, 0.3), 0.5),
        ];
        let (best, score) = select_history(&track).unwrap();
        assert_eq!(score, 0.9);
        assert!((best.cx - 0.2).abs() < 1e-12);

        track.last_predictions = vec![(bb(0.1, 0.1), 0.7), (bb(0.2, 0.2), 0.7)];
        let (best, _) = select_history(&track).unwrap();
        assert!((best.cx - 0.2).abs() < 1e-12, "tie prefers most recent");

        track.last_predictions.clear();
        assert!(matches!(
            select_history(&track),
            Err(TrackerError::EmptyHistory(3))
        ));
    }

    #[test]
    fn history_depth_bounds_embeddings() {
        let mut cfg = TrackerConfig::default();
        cfg.history_depth = 3;
        let present = ScriptFrame {
            detections: vec![],
            responses: [(0u64, stay(bb(0.4, 0.4), 0.9))].into(),
        };
        let mut script = vec![ScriptFrame {
            detections: vec![(bb(0.4, 0.4), 0.9)],
            responses: BTreeMap::new(),
        }];
        for _ in 0..6 {
            script.push(present.clone());
        }
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), cfg);
        run(&mut tracker, 7);
        assert_eq!(tracker.tracks.tracks[0].embedding_history.len(), 3);
        assert_eq!(tracker.tracks.tracks[0].last_predictions.len(), 3);
    }

    #[test]
    fn no_duplicate_identities_per_frame() {
        let script = vec![
            ScriptFrame {
                detections: vec![(bb(0.3, 0.3), 0.9), (bb(0.7, 0.7), 0.8)],
                responses: BTreeMap::new(),
            },
            ScriptFrame {
                detections: vec![(bb(0.31, 0.3), 0.6)],
                responses: [
                    (0u64, stay(bb(0.3, 0.3), 0.9)),
                    (1u64, stay(bb(0.7, 0.7), 0.8)),
                ]
                .into(),
            },
        ];
        let mut tracker = Tracker::new(ScriptedNet::new(script, 8, 4), TrackerConfig::default());
        for r in run(&mut tracker, 2) {
            let mut ids: Vec<u64> = r.detections.iter().map(|d| d.0).collect();
            let n = ids.len();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), n);
        }
    }

    /// refine with steps=1 is bit-identical to a single decode call, and
    /// steps=3 equals the manual three-fold composition.
    #[test]
    fn refine_composition_oracle() {
        let cfg = crate::nets::ModelConfig {
            latent_dim: 8,
            n_ns: 4,
            patch_size: 8,
            image_h: 16,
            image_w: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            ffn_hidden: 16,
        };
        let mut rng = Rng::from_seed(42);
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        let noised = sample_latent_proposals(4, 8, &mut rng);
        let tracks = EmbeddingSet::new(
            Array::fill_normal(vec![2, 8], &mut rng),
            vec![RowTag::Track; 2],
        );
        let features = FeatureMap {
            tokens: Array::fill_normal(vec![cfg.tokens(), 8], &mut rng),
        };

        let one = refine(&noised, &tracks, &features, 1, &params).unwrap();
        let direct = itrn_decode(&noised, &tracks, &features, &params).unwrap();
        assert_eq!(one.data, direct.data);

        let three = refine(&noised, &tracks, &features, 3, &params).unwrap();
        // manual unrolled composition
        let mut cur = noised.clone();
        let mut manual = itrn_decode(&cur, &tracks, &features, &params).unwrap();
        for _ in 1..3 {
            let rows: Vec<Vec<f64>> = (0..4).map(|i| manual.row(i).to_vec()).collect();
            cur = EmbeddingSet::from_rows(rows, RowTag::Noised);
            manual = itrn_decode(&cur, &tracks, &features, &params).unwrap();
        }
        assert_eq!(three.data, manual.data);
        assert_eq!(three.count(), 6, "count preserved");

        assert!(matches!(
            refine(&noised, &tracks, &features, 0, &params),
            Err(TrackerError::ZeroSteps)
        ));
    }
}
