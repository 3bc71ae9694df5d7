//! Bipartite matching between predictions and ground truth, the
//! identity-carryover subset split, and the differentiable set-prediction
//! loss.
//!
//! Targets already tracked in the previous frame are matched by identity
//! and never enter the solver; only newly appearing targets are assigned by
//! the Hungarian algorithm over the matching cost. All remaining
//! predictions are charged as background.

use crate::geom::{giou, BBox};
use crate::ndgrad::{Array, Bindings, GradError, GraphBuilder, NodeId};
use crate::nets::RowTag;
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("duplicate identity {0} in target set")]
    DuplicateIdentity(u64),
    #[error("cost matrix infeasible: {targets} targets but only {preds} predictions")]
    Infeasible { targets: usize, preds: usize },
    #[error("cost matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("carried-over target {0} has no live track-tagged prediction")]
    MissingTrackPrediction(u64),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Loss weighting: classification, L1 box, generalized-IoU box terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
        }
    }
}

pub const BACKGROUND: u8 = 0;
pub const PERSON: u8 = 1;

/// One ground-truth entry: persistent identity, class, box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub id: u64,
    pub class: u8,
    pub bbox: BBox,
}

/// Per-frame ground truth with unique identities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetSet {
    entries: Vec<Target>,
}

impl TargetSet {
    pub fn new(entries: Vec<Target>) -> Result<Self, AssignError> {
        let mut seen = BTreeSet::new();
        for t in &entries {
            if !seen.insert(t.id) {
                return Err(AssignError::DuplicateIdentity(t.id));
            }
        }
        Ok(TargetSet { entries })
    }

    pub fn entries(&self) -> &[Target] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.entries.iter().map(|t| t.id).collect()
    }
}

/// One model output row: class distribution, box, and provenance.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    /// [p(background), p(person)], normalized.
    pub probs: [f64; 2],
    pub bbox: BBox,
    pub source: RowTag,
    /// Identity of the originating track for track-tagged rows.
    pub track_id: Option<u64>,
}

impl Prediction {
    pub fn person_prob(&self) -> f64 {
        self.probs[1]
    }
}

#[derive(Debug, Clone, Default)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Injective target-to-prediction assignment. Every target is paired;
/// predictions outside `pairs` are background.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// (target index, prediction index) pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Prediction indices assigned to the background class.
    pub unmatched_preds: Vec<usize>,
}

impl Assignment {
    fn from_pairs(pairs: Vec<(usize, usize)>, n_preds: usize) -> Self {
        let used: BTreeSet<usize> = pairs.iter().map(|&(_, p)| p).collect();
        debug_assert_eq!(used.len(), pairs.len(), "assignment must be injective");
        let unmatched_preds = (0..n_preds).filter(|p| !used.contains(p)).collect();
        Assignment {
            pairs,
            unmatched_preds,
        }
    }
}

/// Pairwise matching cost between a person target and a prediction:
/// confident person predictions are rewarded, box disagreement is charged
/// through L1 distance and the generalized-IoU loss (1 - giou).
pub fn match_cost(target: &Target, pred: &Prediction, w: &LossWeights) -> f64 {
    debug_assert_eq!(target.class, PERSON);
    let b = &target.bbox;
    let bh = &pred.bbox;
    let l1 = (b.cx - bh.cx).abs() + (b.cy - bh.cy).abs() + (b.w - bh.w).abs() + (b.h - bh.h).abs();
    let g = giou(b, bh).expect("target boxes have positive area");
    -w.lambda_cls * pred.person_prob() + w.lambda_l1 * l1 + w.lambda_giou * (1.0 - g)
}

static HUNGARIAN_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of Hungarian solves since process start. Test instrumentation
/// for the carryover-bypass invariant.
pub fn hungarian_call_count() -> u64 {
    HUNGARIAN_CALLS.load(Ordering::Relaxed)
}

/// Minimum-cost injective assignment of every row (target) to a distinct
/// column (prediction). Requires at least as many columns as rows and
/// finite costs. Among cost-optimal assignments the lexicographically
/// smallest column sequence is returned (row 0 first).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, AssignError> {
    HUNGARIAN_CALLS.fetch_add(1, Ordering::Relaxed);
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment::from_pairs(Vec::new(), 0));
    }
    let m = cost[0].len();
    if m < n {
        return Err(AssignError::Infeasible {
            targets: n,
            preds: m,
        });
    }
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(AssignError::Infeasible {
                targets: n,
                preds: row.len(),
            });
        }
        for (j, &c) in row.iter().enumerate() {
            if !c.is_finite() {
                return Err(AssignError::NonFinite(i, j));
            }
        }
    }

    let base = solve_potentials(cost, n, m);
    let opt: f64 = base.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    let scale = opt.abs().max(1.0);
    let tol = 1e-9 * scale;

    // Lexicographic refinement: fix rows in order to the lowest column
    // index that still completes at the optimal total cost.
    let mut fixed = vec![usize::MAX; n];
    let mut used = vec![false; m];
    let mut prefix_cost = 0.0;
    for i in 0..n {
        let mut chosen = None;
        for j in 0..m {
            if used[j] {
                continue;
            }
            let rest = if i + 1 < n {
                let sub: Vec<Vec<f64>> = (i + 1..n)
                    .map(|r| {
                        (0..m)
                            .filter(|&c| !used[c] && c != j)
                            .map(|c| cost[r][c])
                            .collect()
                    })
                    .collect();
                let sub_assign = solve_potentials(&sub, sub.len(), sub[0].len());
                let remap: Vec<usize> = (0..m).filter(|&c| !used[c] && c != j).collect();
                sub_assign
                    .iter()
                    .enumerate()
                    .map(|(r, &c)| cost[i + 1 + r][remap[c]])
                    .sum()
            } else {
                0.0
            };
            if prefix_cost + cost[i][j] + rest <= opt + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        fixed[i] = j;
        used[j] = true;
        prefix_cost += cost[i][j];
    }

    let pairs = fixed.iter().enumerate().map(|(i, &j)| (i, j)).collect();
    Ok(Assignment::from_pairs(pairs, m))
}

/// Jonker-Volgenant style shortest augmenting paths with potentials.
/// Returns for each row its assigned column. Deterministic.
fn solve_potentials(cost: &[Vec<f64>], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(m >= n);
    if n == 0 {
        return Vec::new();
    }
    let virt = m; // virtual column used to seed each augmentation
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m + 1];
    let mut matched: Vec<Option<usize>> = vec![None; m + 1];

    for i in 0..n {
        matched[virt] = Some(i);
        let mut j0 = virt;
        let mut minv = vec![f64::INFINITY; m];
        let mut way = vec![virt; m];
        let mut visited = vec![false; m + 1];
        loop {
            visited[j0] = true;
            let i0 = matched[j0].unwrap();
            let mut delta = f64::INFINITY;
            let mut j1 = virt;
            for j in 0..m {
                if visited[j] {
                    continue;
                }
                let reduced = cost[i0][j] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if visited[j] {
                    if let Some(pi) = matched[j] {
                        u[pi] += delta;
                    }
                    v[j] -= delta;
                } else if j < m {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0].is_none() {
                break;
            }
        }
        while j0 != virt {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
        }
    }

    let mut row_to_col = vec![usize::MAX; n];
    for (j, &mi) in matched.iter().enumerate().take(m) {
        if let Some(i) = mi {
            row_to_col[i] = j;
        }
    }
    debug_assert!(row_to_col.iter().all(|&j| j != usize::MAX));
    row_to_col
}

/// Split frame-T targets by identity carryover: targets whose identity was
/// live in the previous frame go to the identity-matched subset, the rest
/// are newly detected and will be solver-matched against noised rows.
pub fn split_targets(targets: &TargetSet, prev_ids: &BTreeSet<u64>) -> (TargetSet, TargetSet) {
    let (carried, fresh): (Vec<Target>, Vec<Target>) = targets
        .entries
        .iter()
        .partition(|t| prev_ids.contains(&t.id));
    (TargetSet { entries: carried }, TargetSet { entries: fresh })
}

/// Full two-subset matching for one frame: carried-over targets are bound
/// to the track-tagged prediction with the same identity (no solver);
/// fresh targets are Hungarian-matched against noised-tagged predictions.
pub fn match_predictions(
    targets: &TargetSet,
    preds: &PredictionSet,
    prev_ids: &BTreeSet<u64>,
    w: &LossWeights,
) -> Result<Assignment, AssignError> {
    let (carried, fresh) = split_targets(targets, prev_ids);

    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(targets.len());
    for t in carried.entries() {
        let pred_idx = preds
            .entries
            .iter()
            .position(|p| p.source == RowTag::Track && p.track_id == Some(t.id))
            .ok_or(AssignError::MissingTrackPrediction(t.id))?;
        let target_idx = targets.entries.iter().position(|x| x.id == t.id).unwrap();
        pairs.push((target_idx, pred_idx));
    }

    if !fresh.is_empty() {
        let noised_cols: Vec<usize> = preds
            .entries
            .iter()
            .enumerate()
            .filter(|(_, p)| p.source == RowTag::Noised)
            .map(|(i, _)| i)
            .collect();
        let cost: Vec<Vec<f64>> = fresh
            .entries()
            .iter()
            .map(|t| {
                noised_cols
                    .iter()
                    .map(|&c| match_cost(t, &preds.entries[c], w))
                    .collect()
            })
            .collect();
        let sub = hungarian(&cost)?;
        for (fi, ci) in sub.pairs {
            let t = &fresh.entries()[fi];
            let target_idx = targets.entries.iter().position(|x| x.id == t.id).unwrap();
            pairs.push((target_idx, noised_cols[ci]));
        }
    }

    Ok(Assignment::from_pairs(pairs, preds.len()))
}

const PROB_FLOOR: f64 = 1e-12;

/// Append the set-prediction loss to a graph.
///
/// `probs` is [n x 2] of normalized class probabilities and `boxes` is
/// [n x 4] center-form coordinates; both usually come from the model heads
/// upstream in the same graph so gradients flow through. The assignment is
/// fixed data: matching is recomputed outside the graph every step.
pub fn append_set_loss(
    gb: &mut GraphBuilder,
    probs: NodeId,
    boxes: NodeId,
    targets: &TargetSet,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<NodeId, AssignError> {
    let n = gb.node_shape(probs)[0];

    // Classification: every prediction is charged NLL of its assigned
    // class; unassigned rows take the background class.
    let mut class_idx = vec![BACKGROUND as usize; n];
    for &(t, p) in &assignment.pairs {
        class_idx[p] = targets.entries[t].class as usize;
    }
    let picked = gb.gather(probs, class_idx)?;
    let shifted = gb.add_scalar(picked, -PROB_FLOOR);
    let clamped = gb.relu(shifted);
    let floored = gb.add_scalar(clamped, PROB_FLOOR);
    let logp = gb.log(floored);
    let nll_sum = gb.sum(logp);
    let cls_term = gb.scale(nll_sum, -w.lambda_cls);

    // Box terms apply only to predictions matched to a person target.
    let person_pairs: Vec<(usize, usize)> = assignment
        .pairs
        .iter()
        .copied()
        .filter(|&(t, _)| targets.entries[t].class == PERSON)
        .collect();
    if person_pairs.is_empty() {
        return Ok(cls_term);
    }

    let pred_rows: Vec<usize> = person_pairs.iter().map(|&(_, p)| p).collect();
    let sel = gb.select_rows(boxes, pred_rows)?;
    let k = person_pairs.len();

    let tdata: Vec<f64> = person_pairs
        .iter()
        .flat_map(|&(t, _)| {
            let b = targets.entries[t].bbox;
            [b.cx, b.cy, b.w, b.h]
        })
        .collect();
    let tboxes = gb.constant(Array::matrix(k, 4, tdata.clone()));

    let diff = gb.sub(sel, tboxes)?;
    let l1 = gb.abs(diff);
    let l1_sum = gb.sum(l1);
    let l1_term = gb.scale(l1_sum, w.lambda_l1);

    let giou_node = append_giou_column(gb, sel, &person_pairs, targets)?;
    let neg = gb.scale(giou_node, -1.0);
    let one_minus = gb.add_scalar(neg, 1.0);
    let gsum = gb.sum(one_minus);
    let giou_term = gb.scale(gsum, w.lambda_giou);

    let box_terms = gb.add(l1_term, giou_term)?;
    Ok(gb.add(cls_term, box_terms)?)
}

/// Per-pair generalized IoU of the selected prediction boxes against their
/// (constant) targets, as a [k x 1] column.
fn append_giou_column(
    gb: &mut GraphBuilder,
    sel: NodeId,
    person_pairs: &[(usize, usize)],
    targets: &TargetSet,
) -> Result<NodeId, AssignError> {
    let k = person_pairs.len();
    let col =
        |gb: &mut GraphBuilder, src: NodeId, i: usize| gb.slice_cols(src, i, 1).map_err(AssignError::from);
    // elementwise min/max via relu
    fn emin(gb: &mut GraphBuilder, a: NodeId, b: NodeId) -> Result<NodeId, AssignError> {
        let d = gb.sub(a, b)?;
        let r = gb.relu(d);
        Ok(gb.sub(a, r)?)
    }
    fn emax(gb: &mut GraphBuilder, a: NodeId, b: NodeId) -> Result<NodeId, AssignError> {
        let d = gb.sub(a, b)?;
        let r = gb.relu(d);
        Ok(gb.add(b, r)?)
    }

    let pcx = col(gb, sel, 0)?;
    let pcy = col(gb, sel, 1)?;
    let pw = col(gb, sel, 2)?;
    let ph = col(gb, sel, 3)?;
    let half_w = gb.scale(pw, 0.5);
    let half_h = gb.scale(ph, 0.5);
    let px1 = gb.sub(pcx, half_w)?;
    let px2 = gb.add(pcx, half_w)?;
    let py1 = gb.sub(pcy, half_h)?;
    let py2 = gb.add(pcy, half_h)?;

    let mut tx1 = Vec::with_capacity(k);
    let mut ty1 = Vec::with_capacity(k);
    let mut tx2 = Vec::with_capacity(k);
    let mut ty2 = Vec::with_capacity(k);
    let mut tarea = Vec::with_capacity(k);
    for &(t, _) in person_pairs {
        let b = targets.entries[t].bbox;
        let (x1, y1, x2, y2) = b.to_corners();
        tx1.push(x1);
        ty1.push(y1);
        tx2.push(x2);
        ty2.push(y2);
        tarea.push(b.area());
    }
    let tx1 = gb.constant(Array::matrix(k, 1, tx1));
    let ty1 = gb.constant(Array::matrix(k, 1, ty1));
    let tx2 = gb.constant(Array::matrix(k, 1, tx2));
    let ty2 = gb.constant(Array::matrix(k, 1, ty2));
    let tarea = gb.constant(Array::matrix(k, 1, tarea));

    let ix1 = emax(gb, px1, tx1)?;
    let iy1 = emax(gb, py1, ty1)?;
    let ix2 = emin(gb, px2, tx2)?;
    let iy2 = emin(gb, py2, ty2)?;
    let iw = gb.sub(ix2, ix1)?;
    let iw = gb.relu(iw);
    let ih = gb.sub(iy2, iy1)?;
    let ih = gb.relu(ih);
    let inter = gb.mul(iw, ih)?;

    let parea = gb.mul(pw, ph)?;
    let areas = gb.add(parea, tarea)?;
    let union = gb.sub(areas, inter)?;
    let iou = gb.div(inter, union)?;

    let hx1 = emin(gb, px1, tx1)?;
    let hy1 = emin(gb, py1, ty1)?;
    let hx2 = emax(gb, px2, tx2)?;
    let hy2 = emax(gb, py2, ty2)?;
    let hw = gb.sub(hx2, hx1)?;
    let hh = gb.sub(hy2, hy1)?;
    let hull = gb.mul(hw, hh)?;
    let slack_num = gb.sub(hull, union)?;
    let slack = gb.div(slack_num, hull)?;
    Ok(gb.sub(iou, slack)?)
}

/// Evaluate the set-prediction loss for concrete prediction values.
///
/// Builds the same graph the trainer differentiates and runs it forward, so
/// there is exactly one loss implementation. Predictions left out of the
/// assignment are charged as background per the matching contract.
pub fn set_loss(
    targets: &TargetSet,
    preds: &PredictionSet,
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<f64, AssignError> {
    let n = preds.len();
    let probs_data: Vec<f64> = preds.entries.iter().flat_map(|p| p.probs).collect();
    let boxes_data: Vec<f64> = preds
        .entries
        .iter()
        .flat_map(|p| [p.bbox.cx, p.bbox.cy, p.bbox.w, p.bbox.h])
        .collect();

    if cfg!(debug_assertions) {
        for &(t, p) in &assignment.pairs {
            let class = targets.entries[t].class as usize;
            if preds.entries[p].probs[class] <= PROB_FLOOR {
                eprintln!(
                    "set_loss: probability for prediction {p} class {class} clamped to {PROB_FLOOR}"
                );
            }
        }
    }

    let mut gb = GraphBuilder::new();
    let probs = gb.input("probs", &[n, 2]);
    let boxes = gb.input("boxes", &[n, 4]);
    let loss = append_set_loss(&mut gb, probs, boxes, targets, assignment, w)?;
    gb.output("loss", loss);
    let graph = gb.finish();

    let probs_arr = Array::matrix(n, 2, probs_data);
    let boxes_arr = Array::matrix(n, 4, boxes_data);
    let mut bindings = Bindings::new();
    bindings.bind("probs", &probs_arr).bind("boxes", &boxes_arr);
    let eval = graph.forward(&bindings)?;
    Ok(eval.output("loss")?.scalar_value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{finite_diff_check, Rng};

    fn person(id: u64, cx: f64, cy: f64, w: f64, h: f64) -> Target {
        Target {
            id,
            class: PERSON,
            bbox: BBox::new(cx, cy, w, h),
        }
    }

    fn pred(p_person: f64, bbox: BBox, source: RowTag, track_id: Option<u64>) -> Prediction {
        Prediction {
            probs: [1.0 - p_person, p_person],
            bbox,
            source,
            track_id,
        }
    }

    #[test]
    fn match_cost_perfect_prediction() {
        let t = person(1, 0.5, 0.5, 0.2, 0.2);
        let p = pred(1.0, t.bbox, RowTag::Noised, None);
        let w = LossWeights::default();
        assert!((match_cost(&t, &p, &w) - -2.0).abs() < 1e-12);
    }

    #[test]
    fn match_cost_half_confident() {
        let t = person(1, 0.5, 0.5, 0.2, 0.2);
        let p = pred(0.5, t.bbox, RowTag::Noised, None);
        let w = LossWeights::default();
        assert!((match_cost(&t, &p, &w) - -1.0).abs() < 1e-12);
    }

    #[test]
    fn match_cost_composed_with_geometry_oracle() {
        let t = person(1, 0.5, 0.5, 0.2, 0.2);
        let shifted = BBox::new(0.6, 0.5, 0.2, 0.2);
        let p = pred(0.5, shifted, RowTag::Noised, None);
        let w = LossWeights::default();
        let g = giou(&t.bbox, &shifted).unwrap();
        let expect = -1.0 + 5.0 * 0.1 + 2.0 * (1.0 - g);
        assert!((match_cost(&t, &p, &w) - expect).abs() < 1e-12);
    }

    #[test]
    fn hungarian_diagonal_zeros() {
        let cost = vec![
            vec![0.0, 5.0, 5.0],
            vec![5.0, 0.0, 5.0],
            vec![5.0, 5.0, 0.0],
        ];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(a.unmatched_preds.is_empty());
    }

    #[test]
    fn hungarian_two_by_two() {
        let cost = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_rectangular_leaves_unmatched() {
        let cost = vec![vec![9.0, 1.0, 4.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.unmatched_preds, vec![0, 2]);
    }

    #[test]
    fn hungarian_rejects_infeasible_and_nonfinite() {
        assert!(matches!(
            hungarian(&[vec![1.0], vec![2.0]]),
            Err(AssignError::Infeasible { .. })
        ));
        assert!(matches!(
            hungarian(&[vec![1.0, f64::NAN]]),
            Err(AssignError::NonFinite(0, 1))
        ));
    }

    #[test]
    fn hungarian_lexicographic_tie_break() {
        // All-zero costs: every assignment is optimal; the lexicographically
        // smallest column sequence must win.
        let cost = vec![vec![0.0; 5]; 3];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);

        // Two optima: (0->1, 1->0) and (0->0, 1->1) both cost 2;
        // lexicographic order prefers row 0 on column 0.
        let cost = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
    }

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        let mut cols: Vec<usize> = (0..m).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, n, &mut |perm| {
            let total: f64 = (0..n).map(|i| cost[i][perm[i]]).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(cols: &mut Vec<usize>, k: usize, n: usize, f: &mut impl FnMut(&[usize])) {
        if k == n {
            f(&cols[..n]);
            return;
        }
        for i in k..cols.len() {
            cols.swap(k, i);
            permute(cols, k + 1, n, f);
            cols.swap(k, i);
        }
    }

    #[test]
    fn hungarian_matches_brute_force_small_random() {
        let mut rng = Rng::from_seed(31);
        for _ in 0..200 {
            let n = 1 + rng.below(5);
            let m = n + rng.below(3);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.uniform_in(-5.0, 5.0)).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            let total: f64 = a.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            let expect = brute_force_min(&cost);
            assert!(
                (total - expect).abs() < 1e-9,
                "solver {total} vs brute force {expect}"
            );
        }
    }

    #[test]
    fn split_full_carryover() {
        let targets = TargetSet::new(vec![
            person(1, 0.2, 0.2, 0.1, 0.1),
            person(2, 0.7, 0.7, 0.1, 0.1),
        ])
        .unwrap();
        let prev: BTreeSet<u64> = [1, 2].into();
        let (y1, y2) = split_targets(&targets, &prev);
        assert_eq!(y1.len(), 2);
        assert!(y2.is_empty());
    }

    #[test]
    fn split_first_frame() {
        let targets = TargetSet::new(vec![person(1, 0.2, 0.2, 0.1, 0.1)]).unwrap();
        let (y1, y2) = split_targets(&targets, &BTreeSet::new());
        assert!(y1.is_empty());
        assert_eq!(y2.len(), 1);
    }

    #[test]
    fn split_partial_overlap() {
        let targets = TargetSet::new(vec![
            person(2, 0.2, 0.2, 0.1, 0.1),
            person(3, 0.7, 0.7, 0.1, 0.1),
        ])
        .unwrap();
        let prev: BTreeSet<u64> = [1, 2].into();
        let (y1, y2) = split_targets(&targets, &prev);
        assert_eq!(y1.entries()[0].id, 2);
        assert_eq!(y2.entries()[0].id, 3);
    }

    #[test]
    fn duplicate_identities_rejected() {
        let err = TargetSet::new(vec![
            person(1, 0.2, 0.2, 0.1, 0.1),
            person(1, 0.7, 0.7, 0.1, 0.1),
        ])
        .unwrap_err();
        assert!(matches!(err, AssignError::DuplicateIdentity(1)));
    }

    #[test]
    fn carried_target_without_track_prediction_errors() {
        let targets = TargetSet::new(vec![person(5, 0.5, 0.5, 0.2, 0.2)]).unwrap();
        let preds = PredictionSet {
            entries: vec![pred(0.9, BBox::new(0.5, 0.5, 0.2, 0.2), RowTag::Noised, None)],
        };
        let prev: BTreeSet<u64> = [5].into();
        let err = match_predictions(&targets, &preds, &prev, &LossWeights::default()).unwrap_err();
        assert!(matches!(err, AssignError::MissingTrackPrediction(5)));
    }

    #[test]
    fn carryover_bypasses_hungarian() {
        let targets = TargetSet::new(vec![person(5, 0.5, 0.5, 0.2, 0.2)]).unwrap();
        let preds = PredictionSet {
            entries: vec![
                pred(0.3, BBox::new(0.1, 0.1, 0.1, 0.1), RowTag::Noised, None),
                pred(0.9, BBox::new(0.5, 0.5, 0.2, 0.2), RowTag::Track, Some(5)),
            ],
        };
        let prev: BTreeSet<u64> = [5].into();
        let before = hungarian_call_count();
        let a = match_predictions(&targets, &preds, &prev, &LossWeights::default()).unwrap();
        assert_eq!(hungarian_call_count(), before, "identity subset must bypass the solver");
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.unmatched_preds, vec![0]);
    }

    #[test]
    fn fresh_targets_use_hungarian_on_noised_rows() {
        let targets = TargetSet::new(vec![
            person(5, 0.5, 0.5, 0.2, 0.2),
            person(6, 0.2, 0.2, 0.1, 0.1),
        ])
        .unwrap();
        let preds = PredictionSet {
            entries: vec![
                pred(0.8, BBox::new(0.21, 0.2, 0.1, 0.1), RowTag::Noised, None),
                pred(0.9, BBox::new(0.5, 0.5, 0.2, 0.2), RowTag::Track, Some(5)),
                pred(0.2, BBox::new(0.8, 0.8, 0.1, 0.1), RowTag::Noised, None),
            ],
        };
        let prev: BTreeSet<u64> = [5].into();
        let before = hungarian_call_count();
        let a = match_predictions(&targets, &preds, &prev, &LossWeights::default()).unwrap();
        assert_eq!(hungarian_call_count(), before + 1);
        let mut pairs = a.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    fn straight_line_loss(
        targets: &TargetSet,
        preds: &PredictionSet,
        assignment: &Assignment,
        w: &LossWeights,
    ) -> f64 {
        // Independent reimplementation with plain scalar arithmetic.
        let mut class = vec![0usize; preds.len()];
        for &(t, p) in &assignment.pairs {
            class[p] = targets.entries()[t].class as usize;
        }
        let mut loss = 0.0;
        for (i, p) in preds.entries.iter().enumerate() {
            loss += -w.lambda_cls * p.probs[class[i]].max(1e-12).ln();
        }
        for &(t, pi) in &assignment.pairs {
            let tgt = targets.entries()[t];
            if tgt.class != PERSON {
                continue;
            }
            let p = &preds.entries[pi];
            let l1 = (tgt.bbox.cx - p.bbox.cx).abs()
                + (tgt.bbox.cy - p.bbox.cy).abs()
                + (tgt.bbox.w - p.bbox.w).abs()
                + (tgt.bbox.h - p.bbox.h).abs();
            let g = giou(&tgt.bbox, &p.bbox).unwrap();
            loss += w.lambda_l1 * l1 + w.lambda_giou * (1.0 - g);
        }
        loss
    }

    #[test]
    fn set_loss_zero_for_perfect_predictions() {
        let targets = TargetSet::new(vec![person(1, 0.5, 0.5, 0.2, 0.2)]).unwrap();
        let preds = PredictionSet {
            entries: vec![
                pred(1.0, BBox::new(0.5, 0.5, 0.2, 0.2), RowTag::Noised, None),
                pred(0.0, BBox::new(0.1, 0.1, 0.1, 0.1), RowTag::Noised, None),
            ],
        };
        let assignment = Assignment::from_pairs(vec![(0, 0)], 2);
        let loss = set_loss(&targets, &preds, &assignment, &LossWeights::default()).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn set_loss_half_confident_person() {
        // One matched person at p=0.5 with a perfect box, everything else
        // certain background: 2 * ln 2.
        let targets = TargetSet::new(vec![person(1, 0.5, 0.5, 0.2, 0.2)]).unwrap();
        let preds = PredictionSet {
            entries: vec![
                pred(0.5, BBox::new(0.5, 0.5, 0.2, 0.2), RowTag::Noised, None),
                pred(0.0, BBox::new(0.1, 0.1, 0.1, 0.1), RowTag::Noised, None),
            ],
        };
        let assignment = Assignment::from_pairs(vec![(0, 0)], 2);
        let loss = set_loss(&targets, &preds, &assignment, &LossWeights::default()).unwrap();
        let expect = 2.0 * std::f64::consts::LN_2;
        assert!((loss - expect).abs() < 1e-9, "loss {loss} vs {expect}");
    }

    #[test]
    fn set_loss_matches_independent_oracle() {
        let mut rng = Rng::from_seed(77);
        for _ in 0..50 {
            let targets = TargetSet::new(
                (0..3)
                    .map(|i| {
                        person(
                            i,
                            rng.uniform_in(0.2, 0.8),
                            rng.uniform_in(0.2, 0.8),
                            rng.uniform_in(0.05, 0.3),
                            rng.uniform_in(0.05, 0.3),
                        )
                    })
                    .collect(),
            )
            .unwrap();
            let preds = PredictionSet {
                entries: (0..6)
                    .map(|_| {
                        pred(
                            rng.uniform_in(0.01, 0.99),
                            BBox::new(
                                rng.uniform_in(0.2, 0.8),
                                rng.uniform_in(0.2, 0.8),
                                rng.uniform_in(0.05, 0.3),
                                rng.uniform_in(0.05, 0.3),
                            ),
                            RowTag::Noised,
                            None,
                        )
                    })
                    .collect(),
            };
            let assignment = match_predictions(
                &targets,
                &preds,
                &BTreeSet::new(),
                &LossWeights::default(),
            )
            .unwrap();
            let w = LossWeights::default();
            let got = set_loss(&targets, &preds, &assignment, &w).unwrap();
            let expect = straight_line_loss(&targets, &preds, &assignment, &w);
            assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
            assert!(got >= 0.0);
        }
    }

    #[test]
    fn set_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::from_seed(55);
        let targets = TargetSet::new(vec![
            person(0, 0.4, 0.4, 0.2, 0.25),
            person(1, 0.7, 0.6, 0.15, 0.2),
        ])
        .unwrap();
        let n = 4;
        let assignment = Assignment::from_pairs(vec![(0, 1), (1, 3)], n);
        let w = LossWeights::default();

        let mut gb = GraphBuilder::new();
        // logits -> softmax so the probability simplex stays intact under
        // the finite-difference perturbations
        let logits = gb.input("logits", &[n, 2]);
        let probs = gb.softmax(logits);
        let boxes = gb.input("boxes", &[n, 4]);
        let loss = append_set_loss(&mut gb, probs, boxes, &targets, &assignment, &w).unwrap();
        gb.output("loss", loss);
        let graph = gb.finish();

        let mut point = std::collections::BTreeMap::new();
        point.insert(
            "logits".to_string(),
            Array::fill_uniform(vec![n, 2], -1.0, 1.0, &mut rng),
        );
        point.insert(
            "boxes".to_string(),
            Array::fill_uniform(vec![n, 4], 0.2, 0.8, &mut rng),
        );
        let err = finite_diff_check(&graph, &point, 1e-6).unwrap();
        assert!(err < 1e-5, "gradient error {err}");
    }

    #[test]
    fn set_loss_nonnegative_random() {
        let mut rng = Rng::from_seed(123);
        for _ in 0..100 {
            let targets = TargetSet::new(vec![person(
                0,
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.05, 0.4),
                rng.uniform_in(0.05, 0.4),
            )])
            .unwrap();
            let preds = PredictionSet {
                entries: (0..3)
                    .map(|_| {
                        pred(
                            rng.uniform(),
                            BBox::new(
                                rng.uniform_in(0.1, 0.9),
                                rng.uniform_in(0.1, 0.9),
                                rng.uniform_in(0.01, 0.5),
                                rng.uniform_in(0.01, 0.5),
                            ),
                            RowTag::Noised,
                            None,
                        )
                    })
                    .collect(),
            };
            let assignment =
                match_predictions(&targets, &preds, &BTreeSet::new(), &LossWeights::default())
                    .unwrap();
            let loss =
                set_loss(&targets, &preds, &assignment, &LossWeights::default()).unwrap();
            assert!(loss >= 0.0, "loss {loss}");
        }
    }
}
