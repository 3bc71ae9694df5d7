//! CLEAR MOT evaluation: gated, identity-persistent matching between
//! ground truth and hypotheses, count accumulation, and the MOTA / MOTP /
//! MOTP* metrics (reported on the x100 scale).
//!
//! Matches persist across frames while they stay above the IoU gate; the
//! remainder is matched per frame by the Hungarian solver on 1 - IoU. A
//! ground truth matched to a different hypothesis identity than its last
//! match counts one identity switch.

use crate::assign::hungarian;
use crate::geom::{iou, BBox};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("duplicate {side} id {id} in frame")]
    DuplicateId { side: &'static str, id: i64 },
    #[error("metric undefined without ground truth")]
    NoGroundTruth,
}

/// Per-sequence accumulators.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalCounts {
    pub n_match: usize,
    pub n_fp: usize,
    pub n_fn: usize,
    pub n_idsw: usize,
    pub n_gt: usize,
    pub iou_sum: f64,
}

impl EvalCounts {
    /// Commutative merge; sequence totals equal per-frame sums.
    pub fn merge(&self, other: &EvalCounts) -> EvalCounts {
        EvalCounts {
            n_match: self.n_match + other.n_match,
            n_fp: self.n_fp + other.n_fp,
            n_fn: self.n_fn + other.n_fn,
            n_idsw: self.n_idsw + other.n_idsw,
            n_gt: self.n_gt + other.n_gt,
            iou_sum: self.iou_sum + other.iou_sum,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// Minimum IoU for a valid ground-truth/hypothesis match.
    pub iou_gate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_gate: 0.5 }
    }
}

/// Result of matching one frame.
#[derive(Debug, Clone)]
pub struct FrameMatch {
    /// (gt id, hyp id, IoU) per match.
    pub pairs: Vec<(i64, i64, f64)>,
    pub fp: usize,
    pub fn_: usize,
    pub id_switches: usize,
}

const FORBIDDEN: f64 = 1e9;

/// Match one frame's ground truth against hypotheses.
///
/// `prev_matches` carries each ground truth's last matched hypothesis id;
/// it is consulted for persistence and switch counting and updated with
/// this frame's pairs (stale entries persist across gaps, per the
/// protocol).
pub fn match_frame(
    gt: &[(i64, BBox)],
    hyp: &[(i64, BBox)],
    prev_matches: &mut BTreeMap<i64, i64>,
    cfg: &EvalConfig,
) -> Result<FrameMatch, EvalError> {
    check_unique(gt, "ground truth")?;
    check_unique(hyp, "hypothesis")?;

    let mut gt_matched = vec![false; gt.len()];
    let mut hyp_matched = vec![false; hyp.len()];
    let mut pairs: Vec<(i64, i64, f64)> = Vec::new();

    // persistence: keep last frame's pairing while it clears the gate
    for (gi, &(gid, gbox)) in gt.iter().enumerate() {
        if let Some(&hid) = prev_matches.get(&gid) {
            if let Some(hi) = hyp.iter().position(|&(h, _)| h == hid) {
                let overlap = iou(&gbox, &hyp[hi].1);
                if overlap >= cfg.iou_gate && !hyp_matched[hi] {
                    gt_matched[gi] = true;
                    hyp_matched[hi] = true;
                    pairs.push((gid, hid, overlap));
                }
            }
        }
    }

    // Hungarian on the remainder, restricted to pairs above the gate
    let free_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt_matched[i]).collect();
    let free_hyp: Vec<usize> = (0..hyp.len()).filter(|&i| !hyp_matched[i]).collect();
    if !free_gt.is_empty() && !free_hyp.is_empty() {
        // pad virtual columns so every row stays assignable
        let cols = free_hyp.len() + free_gt.len();
        let cost: Vec<Vec<f64>> = free_gt
            .iter()
            .map(|&gi| {
                let mut row: Vec<f64> = free_hyp
                    .iter()
                    .map(|&hi| {
                        let overlap = iou(&gt[gi].1, &hyp[hi].1);
                        if overlap >= cfg.iou_gate {
                            1.0 - overlap
                        } else {
                            FORBIDDEN
                        }
                    })
                    .collect();
                row.resize(cols, FORBIDDEN);
                row
            })
            .collect();
        let assignment = hungarian(&cost).expect("finite padded matrix");
        for (row, col) in assignment.pairs {
            if col >= free_hyp.len() || cost[row][col] >= FORBIDDEN {
                continue;
            }
            let gi = free_gt[row];
            let hi = free_hyp[col];
            gt_matched[gi] = true;
            hyp_matched[hi] = true;
            pairs.push((gt[gi].0, hyp[hi].0, 1.0 - cost[row][col]));
        }
    }

    let mut id_switches = 0;
    for &(gid, hid, _) in &pairs {
        if let Some(&last) = prev_matches.get(&gid) {
            if last != hid {
                id_switches += 1;
            }
        }
        prev_matches.insert(gid, hid);
    }

    pairs.sort_by_key(|&(gid, _, _)| gid);
    let fp = hyp_matched.iter().filter(|&&m| !m).count();
    let fn_ = gt_matched.iter().filter(|&&m| !m).count();
    Ok(FrameMatch {
        pairs,
        fp,
        fn_,
        id_switches,
    })
}

fn check_unique(side_data: &[(i64, BBox)], side: &'static str) -> Result<(), EvalError> {
    let mut seen = BTreeSet::new();
    for &(id, _) in side_data {
        if !seen.insert(id) {
            return Err(EvalError::DuplicateId { side, id });
        }
    }
    Ok(())
}

/// Evaluate a whole sequence of per-frame ground truth and hypotheses.
pub fn evaluate_sequence(
    gt: &[Vec<(i64, BBox)>],
    hyp: &[Vec<(i64, BBox)>],
    cfg: &EvalConfig,
) -> Result<EvalCounts, EvalError> {
    let frames = gt.len().max(hyp.len());
    let empty: Vec<(i64, BBox)> = Vec::new();
    let mut prev = BTreeMap::new();
    let mut counts = EvalCounts::default();
    for f in 0..frames {
        let g = gt.get(f).unwrap_or(&empty);
        let h = hyp.get(f).unwrap_or(&empty);
        let m = match_frame(g, h, &mut prev, cfg)?;
        counts.n_match += m.pairs.len();
        counts.iou_sum += m.pairs.iter().map(|p| p.2).sum::<f64>();
        counts.n_fp += m.fp;
        counts.n_fn += m.fn_;
        counts.n_idsw += m.id_switches;
        counts.n_gt += g.len();
    }
    Ok(counts)
}

/// Mean IoU over matches, x100. Undefined (None) without matches.
pub fn motp(counts: &EvalCounts) -> Option<f64> {
    if counts.n_match == 0 {
        return None;
    }
    Some(counts.iou_sum / counts.n_match as f64 * 100.0)
}

/// Tracking accuracy combining false positives, misses, and identity
/// switches, x100. Unbounded below.
pub fn mota(counts: &EvalCounts) -> Result<f64, EvalError> {
    if counts.n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok((1.0 - (counts.n_fp + counts.n_fn + counts.n_idsw) as f64 / counts.n_gt as f64) * 100.0)
}

/// Precision variant charging zero IoU per missed detection: total match
/// IoU over total ground truth, x100.
pub fn motp_star(counts: &EvalCounts) -> Result<f64, EvalError> {
    if counts.n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    Ok(counts.iou_sum / counts.n_gt as f64 * 100.0)
}

/// Relative improvement of `ours` over `baseline` in percent.
pub fn relative_improvement(ours: f64, baseline: f64) -> f64 {
    (ours - baseline) / baseline * 100.0
}

/// Signed one-decimal percent string, e.g. `+5.1%`.
pub fn format_improvement(ours: f64, baseline: f64) -> String {
    format!("{:+.1}%", relative_improvement(ours, baseline))
}

#[derive(Debug, Clone)]
pub struct SequenceMetrics {
    pub name: String,
    pub counts: EvalCounts,
}

/// Per-sequence metric table plus a merged TOTAL row.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub rows: Vec<SequenceMetrics>,
}

impl Report {
    pub fn total(&self) -> EvalCounts {
        self.rows
            .iter()
            .fold(EvalCounts::default(), |acc, r| acc.merge(&r.counts))
    }

    fn format_row(name: &str, c: &EvalCounts, out: &mut String, csv: bool) {
        let mota_s = mota(c).map_or("-".to_string(), |v| format!("{v:.1}"));
        let motp_s = motp(c).map_or("-".to_string(), |v| format!("{v:.1}"));
        let motps_s = motp_star(c).map_or("-".to_string(), |v| format!("{v:.1}"));
        if csv {
            let _ = writeln!(
                out,
                "{name},{mota_s},{motp_s},{motps_s},{},{},{},{}",
                c.n_fp, c.n_fn, c.n_idsw, c.n_gt
            );
        } else {
            let _ = writeln!(
                out,
                "{name:<16} {mota_s:>7} {motp_s:>7} {motps_s:>7} {:>6} {:>6} {:>6} {:>7}",
                c.n_fp, c.n_fn, c.n_idsw, c.n_gt
            );
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,MOTA,MOTP,MOTP*,FP,FN,IDSW,GT\n");
        for row in &self.rows {
            Self::format_row(&row.name, &row.counts, &mut out, true);
        }
        if self.rows.len() > 1 {
            Self::format_row("TOTAL", &self.total(), &mut out, true);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<16} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6} {:>7}\n",
            "sequence", "MOTA", "MOTP", "MOTP*", "FP", "FN", "IDSW", "GT"
        );
        for row in &self.rows {
            Self::format_row(&row.name, &row.counts, &mut out, false);
        }
        if self.rows.len() > 1 {
            Self::format_row("TOTAL", &self.total(), &mut out, false);
        }
        out
    }
}
