//! TP/FP assignment, precision-recall curves and average precision.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, Detection};
use crate::error::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMethod {
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    #[serde(rename = "11point")]
    ElevenPoint,
    /// Area under the monotone precision envelope.
    #[serde(rename = "allpoint")]
    AllPoint,
}

impl fmt::Display for ApMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ApMethod::ElevenPoint => "11point",
            ApMethod::AllPoint => "allpoint",
        })
    }
}

impl FromStr for ApMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "11point" => Ok(ApMethod::ElevenPoint),
            "allpoint" => Ok(ApMethod::AllPoint),
            _ => Err(format!("unknown AP method {s:?} (expected 11point or allpoint)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched only a difficult ground truth; neither rewarded nor penalized.
    Ignored,
}

/// Descending confidence; equal confidences keep their relative order.
pub fn sort_by_confidence(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
}

/// Greedy matching of one image's detections of `class_id` (already sorted by
/// descending confidence) against its ground truth. Each detection claims the
/// highest-IoU ground truth of the class that is still unmatched, not
/// difficult and overlaps by at least `iou_thresh`. Detections of other
/// classes are reported as `None`.
pub fn assign_tp_fp(dets: &[Detection], gts: &[Annotation], class_id: usize, iou_thresh: f64) -> Vec<Option<Outcome>> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            if d.class_id != class_id {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            let mut hits_difficult = false;
            for (j, g) in gts.iter().enumerate() {
                if g.class_id != class_id {
                    continue;
                }
                let iou = d.bbox.iou(&g.bbox);
                if iou < iou_thresh {
                    continue;
                }
                if g.difficult {
                    hits_difficult = true;
                } else if !taken[j] && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            Some(match best {
                Some((j, _)) => {
                    taken[j] = true;
                    Outcome::TruePositive
                }
                None if hits_difficult => Outcome::Ignored,
                None => Outcome::FalsePositive,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision/recall after each scored detection, given as
/// `(confidence, is_true_positive)` in ranking order.
pub fn pr_curve(ranked: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let (mut tp, mut fp) = (0, 0);
    ranked
        .iter()
        .map(|&(confidence, hit)| {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                confidence,
                tp,
                fp,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApValue {
    pub ap: f64,
    /// Set when the class had no ground truth and AP was defined as 0.
    pub no_ground_truth: bool,
}

pub fn average_precision(points: &[PrPoint], n_gt: usize, method: ApMethod) -> ApValue {
    if n_gt == 0 {
        return ApValue { ap: 0.0, no_ground_truth: true };
    }
    let ap = match method {
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|i| {
                    let r = i as f64 / 10.0;
                    points.iter().filter(|p| p.recall >= r).map(|p| p.precision).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
        ApMethod::AllPoint => {
            let mut envelope: Vec<f64> = points.iter().map(|p| p.precision).collect();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (p, &e) in points.iter().zip(&envelope) {
                area += (p.recall - prev_recall) * e;
                prev_recall = p.recall;
            }
            area
        }
    };
    ApValue { ap, no_ground_truth: false }
}

/// Arithmetic mean over the full class set, zeros included.
pub fn mean_ap(per_class: &[f64], num_classes: usize) -> Result<f64, EvalError> {
    if per_class.len() != num_classes || num_classes == 0 {
        return Err(EvalError::Contract(format!("{} AP values for {num_classes} classes", per_class.len())));
    }
    Ok(per_class.iter().sum::<f64>() / num_classes as f64)
}

/// Per-class AP over a whole test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEvaluation {
    pub ap: ApValue,
    pub n_gt: usize,
    pub n_detections: usize,
    pub curve: Vec<PrPoint>,
}

/// Scores one class over every image. `dets[i]` and `gts[i]` belong to image
/// `i`. Detections are ranked by confidence; ties are broken by image index
/// and then by box coordinates, so the result does not depend on the order
/// detections are listed in.
pub fn evaluate_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    class_id: usize,
    iou_thresh: f64,
    method: ApMethod,
) -> ClassEvaluation {
    let mut scored: Vec<(f64, usize, bool)> = Vec::new();
    let mut n_detections = 0;
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let mut mine: Vec<Detection> = d.iter().filter(|x| x.class_id == class_id).copied().collect();
        mine.sort_by(canonical_order);
        n_detections += mine.len();
        for (det, outcome) in mine.iter().zip(assign_tp_fp(&mine, g, class_id, iou_thresh)) {
            match outcome {
                Some(Outcome::TruePositive) => scored.push((det.confidence, img, true)),
                Some(Outcome::FalsePositive) => scored.push((det.confidence, img, false)),
                _ => {}
            }
        }
    }
    // stable: equal confidences within an image keep their canonical order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let ranked: Vec<(f64, bool)> = scored.iter().map(|&(c, _, t)| (c, t)).collect();
    let n_gt = gts.iter().flatten().filter(|g| g.class_id == class_id && !g.difficult).count();
    let curve = pr_curve(&ranked, n_gt);
    let ap = average_precision(&curve, n_gt, method);
    ClassEvaluation { ap, n_gt, n_detections, curve }
}

fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    let key = |d: &Detection| [d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax];
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| key(a).iter().zip(key(b)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal))
}
