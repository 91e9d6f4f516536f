//! Detection and counting metrics.
//!
//! Matching is greedy: detections are visited by descending confidence (ties
//! keep input order) and each takes the unmatched ground-truth box with the
//! highest IoU at or above the threshold, ties going to the lower GT index.
//! Ratios with an empty denominator are reported as 0.

use std::collections::HashMap;

use crate::annotations::{BoundingBox, ScoredBox};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub detection: usize,
    pub ground_truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub pairs: Vec<MatchPair>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Indices of `dets` sorted by descending confidence; stable for ties.
fn confidence_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Uniform grid over GT boxes. A box is registered in every cell it touches,
/// so any box overlapping a query shares at least one cell with it.
struct GtIndex {
    cell: f64,
    len: usize,
    bounds: (i64, i64, i64, i64),
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl GtIndex {
    fn new(gts: &[BoundingBox]) -> Self {
        let cell = gts.iter().map(|b| b.w.max(b.h)).fold(0.0f64, f64::max).max(1e-9);
        let mut index = Self {
            cell,
            len: gts.len(),
            bounds: (i64::MAX, i64::MIN, i64::MAX, i64::MIN),
            cells: HashMap::new(),
        };
        for (i, b) in gts.iter().enumerate() {
            let (x0, x1, y0, y1) = index.span(b);
            let (bx0, bx1, by0, by1) = &mut index.bounds;
            (*bx0, *bx1, *by0, *by1) = ((*bx0).min(x0), (*bx1).max(x1), (*by0).min(y0), (*by1).max(y1));
            for x in x0..=x1 {
                for y in y0..=y1 {
                    index.cells.entry((x, y)).or_default().push(i);
                }
            }
        }
        index
    }

    fn span(&self, b: &BoundingBox) -> (i64, i64, i64, i64) {
        let key = |v: f64| (v / self.cell).floor() as i64;
        (key(b.x_min()), key(b.x_max()), key(b.y_min()), key(b.y_max()))
    }

    /// GT indices that may overlap `b`, ascending.
    fn candidates(&self, b: &BoundingBox) -> Vec<usize> {
        let (x0, x1, y0, y1) = self.span(b);
        let (bx0, bx1, by0, by1) = self.bounds;
        let (x0, x1, y0, y1) = (x0.max(bx0), x1.min(bx1), y0.max(by0), y1.min(by1));
        if x0 > x1 || y0 > y1 {
            return Vec::new();
        }
        // a query wider than the occupied cells is cheaper as a full scan
        let area = (x1 - x0 + 1) as u128 * (y1 - y0 + 1) as u128;
        if area > self.cells.len() as u128 {
            return (0..self.len).collect();
        }
        let mut out: Vec<usize> = (x0..=x1)
            .flat_map(|x| (y0..=y1).map(move |y| (x, y)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Greedy assignment; returns, in visiting order, each detection index with
/// the GT it matched (if any).
fn greedy(dets: &[ScoredBox], gts: &[BoundingBox], iou_threshold: f64) -> Vec<(usize, Option<(usize, f64)>)> {
    let mut taken = vec![false; gts.len()];
    let index = GtIndex::new(gts);
    confidence_order(dets)
        .into_iter()
        .map(|di| {
            let mut best: Option<(usize, f64)> = None;
            for gi in index.candidates(&dets[di].bbox) {
                if taken[gi] {
                    continue;
                }
                let iou = dets[di].bbox.iou(&gts[gi]);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            (di, best)
        })
        .collect()
}

fn check_threshold(iou_threshold: f64) -> Result<()> {
    if iou_threshold > 0.0 && iou_threshold <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )))
    }
}

pub fn match_detections(dets: &[ScoredBox], gts: &[BoundingBox], iou_threshold: f64) -> Result<MatchResult> {
    check_threshold(iou_threshold)?;
    let pairs: Vec<MatchPair> = greedy(dets, gts, iou_threshold)
        .into_iter()
        .filter_map(|(detection, m)| {
            m.map(|(ground_truth, iou)| MatchPair {
                detection,
                ground_truth,
                iou,
            })
        })
        .collect();
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    PrecisionRecall {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
    }
}

pub fn precision_recall_f1(m: &MatchResult) -> PrecisionRecall {
    prf_from_counts(m.tp, m.fp, m.fn_)
}

/// F1 as the harmonic mean of precision and recall; equals
/// `2TP / (2TP + FP + FN)` whenever both come from the same counts.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub confidence: f64,
}

/// Precision/recall after each detection of the confidence sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Monotone envelope: `interpolated[i] = max_{k >= i} points[k].precision`.
    pub interpolated: Vec<f64>,
}

pub fn pr_curve(dets: &[ScoredBox], gts: &[BoundingBox], iou_threshold: f64) -> Result<PrCurve> {
    check_threshold(iou_threshold)?;
    if gts.is_empty() {
        return Err(Error::Undefined("precision/recall curve without ground truth".into()));
    }
    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let points: Vec<PrPoint> = greedy(dets, gts, iou_threshold)
        .into_iter()
        .enumerate()
        .map(|(rank, (di, m))| {
            tp += m.is_some() as usize;
            PrPoint {
                recall: tp as f64 / n_gt,
                precision: tp as f64 / (rank + 1) as f64,
                confidence: dets[di].confidence,
            }
        })
        .collect();
    let mut interpolated = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].precision);
        interpolated[i] = running;
    }
    Ok(PrCurve { points, interpolated })
}

/// All-point interpolated AP: `sum_i (R_{i+1} - R_i) * P_interp(R_{i+1})`
/// with `R_0 = 0`.
pub fn average_precision(dets: &[ScoredBox], gts: &[BoundingBox], iou_threshold: f64) -> Result<f64> {
    let curve = pr_curve(dets, gts, iou_threshold)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, interp) in curve.points.iter().zip(&curve.interpolated) {
        ap += (p.recall - prev_recall) * interp;
        prev_recall = p.recall;
    }
    Ok(ap)
}

/// Relative counting precision `1 - |predicted - gt| / gt`; negative when the
/// error exceeds the ground truth.
pub fn relative_precision(predicted: f64, gt: f64) -> Result<f64> {
    if gt.is_nan() || gt <= 0.0 || !predicted.is_finite() || !gt.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "relative precision needs gt > 0, got gt = {gt}"
        )));
    }
    Ok(1.0 - (predicted - gt).abs() / gt)
}
