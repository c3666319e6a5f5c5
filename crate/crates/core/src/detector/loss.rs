//! The multibox objective: softmax cross-entropy over matched and mined
//! anchors plus smooth-L1 box regression, normalized by the positive count.
//!
//! ```text
//! L = (L_conf + alpha * L_loc) / N        (L = 0 when N = 0)
//! ```

use super::anchors::{MatchAssignment, OffsetVector};
use crate::error::DetectorError;

/// Floor applied to probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `0.5 d^2` for `|d| < 1`, `|d| - 0.5` otherwise, with `d = x - y`.
pub fn smooth_l1(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d < 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

/// Derivative of [`smooth_l1`] with respect to `x`.
pub fn smooth_l1_grad(x: f64, y: f64) -> f64 {
    let d = x - y;
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// `-ln p[label]`, with `p` floored at [`PROB_FLOOR`].
pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    -p[label].max(PROB_FLOOR).ln()
}

/// Per-anchor class logits and their softmax probabilities, row-major
/// `anchors x (C + 1)` with column 0 the background.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub num_columns: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ClassScores {
    pub fn from_logits(logits: Vec<f64>, num_columns: usize) -> Self {
        assert!(num_columns > 0 && logits.len() % num_columns == 0);
        let mut probs = logits.clone();
        for row in probs.chunks_exact_mut(num_columns) {
            softmax_in_place(row);
        }
        ClassScores { num_columns, logits, probs }
    }

    pub fn num_anchors(&self) -> usize {
        self.logits.len() / self.num_columns
    }

    pub fn row(&self, anchor: usize) -> &[f64] {
        &self.probs[anchor * self.num_columns..(anchor + 1) * self.num_columns]
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub confidence: f64,
    pub localization: f64,
    pub alpha: f64,
    pub num_positive: usize,
}

/// Loss plus its gradient with respect to the logits and offset predictions.
#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub breakdown: LossBreakdown,
    pub d_logits: Vec<f64>,
    pub d_offsets: Vec<OffsetVector>,
    /// Background anchors selected by hard negative mining, in rank order.
    pub negatives: Vec<usize>,
}

/// Background anchors ranked by background confidence loss, highest first
/// (ties to the lower index), truncated to `ratio * N`.
pub fn mine_hard_negatives(scores: &ClassScores, assign: &MatchAssignment, ratio: f64) -> Vec<usize> {
    let mut candidates: Vec<(f64, usize)> = (0..scores.num_anchors())
        .filter(|&i| !assign.is_positive(i))
        .map(|i| (cross_entropy(scores.row(i), 0), i))
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep = ((ratio * assign.num_positive as f64).floor() as usize).min(candidates.len());
    candidates.truncate(keep);
    candidates.into_iter().map(|(_, i)| i).collect()
}

pub fn multibox_loss(
    scores: &ClassScores,
    offsets: &[OffsetVector],
    assign: &MatchAssignment,
    targets: &[OffsetVector],
    alpha: f64,
    hard_negative_ratio: f64,
) -> Result<LossBreakdown, DetectorError> {
    multibox_loss_with_grad(scores, offsets, assign, targets, alpha, hard_negative_ratio).map(|l| l.breakdown)
}

pub fn multibox_loss_with_grad(
    scores: &ClassScores,
    offsets: &[OffsetVector],
    assign: &MatchAssignment,
    targets: &[OffsetVector],
    alpha: f64,
    hard_negative_ratio: f64,
) -> Result<LossWithGrad, DetectorError> {
    let n = scores.num_anchors();
    if offsets.len() != n || targets.len() != n || assign.labels.len() != n {
        return Err(DetectorError::Contract(format!(
            "length mismatch: {n} score rows, {} offsets, {} targets, {} labels",
            offsets.len(),
            targets.len(),
            assign.labels.len()
        )));
    }
    let cols = scores.num_columns;
    let mut d_logits = vec![0.0; n * cols];
    let mut d_offsets = vec![OffsetVector::default(); n];
    let num_positive = assign.num_positive;
    if num_positive == 0 {
        let breakdown = LossBreakdown { alpha, ..Default::default() };
        return Ok(LossWithGrad { breakdown, d_logits, d_offsets, negatives: Vec::new() });
    }
    let scale = 1.0 / num_positive as f64;
    let negatives = mine_hard_negatives(scores, assign, hard_negative_ratio);

    let mut confidence = 0.0;
    let mut add_ce = |anchor: usize, label: usize, d_logits: &mut [f64]| {
        let p = scores.row(anchor);
        confidence += cross_entropy(p, label);
        // inside the floor the loss is constant
        if p[label] > PROB_FLOOR {
            let g = &mut d_logits[anchor * cols..(anchor + 1) * cols];
            for (c, gv) in g.iter_mut().enumerate() {
                *gv += scale * (p[c] - f64::from(u8::from(c == label)));
            }
        }
    };
    for i in (0..n).filter(|&i| assign.is_positive(i)) {
        add_ce(i, assign.labels[i], &mut d_logits);
    }
    for &i in &negatives {
        add_ce(i, 0, &mut d_logits);
    }

    let mut localization = 0.0;
    for i in (0..n).filter(|&i| assign.is_positive(i)) {
        let (pred, tgt) = (offsets[i].to_array(), targets[i].to_array());
        let mut g = [0.0; 4];
        for k in 0..4 {
            localization += smooth_l1(pred[k], tgt[k]);
            g[k] = scale * alpha * smooth_l1_grad(pred[k], tgt[k]);
        }
        d_offsets[i] = OffsetVector::from_array(g);
    }

    let breakdown = LossBreakdown {
        total: (confidence + alpha * localization) * scale,
        confidence,
        localization,
        alpha,
        num_positive,
    };
    Ok(LossWithGrad { breakdown, d_logits, d_offsets, negatives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.3, 0.3), 0.0);
        assert_eq!(smooth_l1(1.0, 0.5), 0.125);
        assert_eq!(smooth_l1(-1.0, 1.0), 1.5);
        // continuous at |d| = 1
        assert!((smooth_l1(1.0 - 1e-12, 0.0) - smooth_l1(1.0, 0.0)).abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0], 1), 0.0);
        assert!((cross_entropy(&[0.5, 0.5], 0) - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[0.25; 4], 3) - 4f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(&[1.0, 0.0], 1) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = ClassScores::from_logits(vec![1000.0, 0.0, -3.0, 0.1, 0.2, 0.3], 3);
        for a in 0..2 {
            assert!((s.row(a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn assignment(labels: Vec<usize>) -> MatchAssignment {
        let num_positive = labels.iter().filter(|&&l| l != 0).count();
        let matched_gt = labels.iter().map(|&l| (l != 0).then_some(0)).collect();
        MatchAssignment { labels, matched_gt, num_positive }
    }

    #[test]
    fn no_positives_means_zero_loss() {
        let s = ClassScores::from_logits(vec![0.5; 15], 5);
        let o = vec![OffsetVector::default(); 3];
        let l = multibox_loss(&s, &o, &assignment(vec![0, 0, 0]), &o, 1.0, 3.0).unwrap();
        assert_eq!((l.total, l.confidence, l.localization, l.num_positive), (0.0, 0.0, 0.0, 0));
    }

    #[test]
    fn perfect_predictions_approach_zero_loss() {
        // anchor 0 is a confident class-2 positive, anchors 1-2 confident background
        let mut logits = vec![0.0; 15];
        logits[2] = 60.0;
        logits[5] = 60.0;
        logits[10] = 60.0;
        let s = ClassScores::from_logits(logits, 5);
        let t = vec![OffsetVector { tx: 0.2, ty: -1.0, tw: 0.5, th: 3.0 }; 3];
        let l = multibox_loss(&s, &t, &assignment(vec![2, 0, 0]), &t, 1.0, 3.0).unwrap();
        assert!(l.total < 1e-20, "{l:?}");
    }

    #[test]
    fn length_mismatch_is_a_contract_error() {
        let s = ClassScores::from_logits(vec![0.0; 10], 5);
        let o = vec![OffsetVector::default(); 3];
        assert!(matches!(
            multibox_loss(&s, &o, &assignment(vec![0, 1]), &o, 1.0, 3.0),
            Err(DetectorError::Contract(_))
        ));
    }

    /// Straight transcription of the objective: enumerate anchors, pick the
    /// negatives by sorting their background losses, sum the pieces.
    fn naive_loss(logits: &[f64], cols: usize, labels: &[usize], pred: &[[f64; 4]], tgt: &[[f64; 4]], alpha: f64, ratio: usize) -> f64 {
        let n = labels.len();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row = &logits[i * cols..(i + 1) * cols];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                row.iter().map(|v| v.exp() / z).collect()
            })
            .collect();
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i] != 0).collect();
        if pos.is_empty() {
            return 0.0;
        }
        let mut neg: Vec<(f64, usize)> = (0..n).filter(|&i| labels[i] == 0).map(|i| (-probs[i][0].ln(), i)).collect();
        neg.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut conf = 0.0;
        for &i in &pos {
            conf -= probs[i][labels[i]].ln();
        }
        for &(l, _) in neg.iter().take(ratio * pos.len()) {
            conf += l;
        }
        let mut loc = 0.0;
        for &i in &pos {
            for k in 0..4 {
                let d = (pred[i][k] - tgt[i][k]).abs();
                loc += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
            }
        }
        (conf + alpha * loc) / pos.len() as f64
    }

    #[test]
    fn matches_naive_evaluation_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let (n, cols) = (5, 5);
            let logits: Vec<f64> = (0..n * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut labels = vec![0; n];
            labels[rng.gen_range(0..n)] = rng.gen_range(1..cols);
            let second = (0..n).find(|&i| labels[i] == 0).unwrap();
            labels[second] = rng.gen_range(1..cols);
            let pred: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0))).collect();
            let tgt: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0))).collect();
            let alpha = rng.gen_range(0.5..2.0);

            let s = ClassScores::from_logits(logits.clone(), cols);
            let o: Vec<OffsetVector> = pred.iter().map(|p| OffsetVector::from_array(*p)).collect();
            let t: Vec<OffsetVector> = tgt.iter().map(|p| OffsetVector::from_array(*p)).collect();
            let l = multibox_loss(&s, &o, &assignment(labels.clone()), &t, alpha, 1.0).unwrap();
            let expected = naive_loss(&logits, cols, &labels, &pred, &tgt, alpha, 1);
            assert!((l.total - expected).abs() < 1e-9, "{} vs {expected}", l.total);
            assert_eq!(l.num_positive, 2);
        }
    }

    #[test]
    fn alpha_scales_only_the_localization_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = ClassScores::from_logits((0..20).map(|_| rng.gen_range(-2.0..2.0)).collect(), 5);
        let o: Vec<OffsetVector> = (0..4).map(|_| OffsetVector::from_array(std::array::from_fn(|_| rng.gen()))).collect();
        let t = vec![OffsetVector::default(); 4];
        let a = assignment(vec![1, 0, 3, 0]);
        let l1 = multibox_loss(&s, &o, &a, &t, 1.0, 3.0).unwrap();
        let l2 = multibox_loss(&s, &o, &a, &t, 2.0, 3.0).unwrap();
        let conf = l1.confidence / 2.0;
        assert!(((l2.total - conf) - 2.0 * (l1.total - conf)).abs() < 1e-12);
    }

    #[test]
    fn logit_and_offset_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cols = 4;
        let logits: Vec<f64> = (0..6 * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let o: Vec<OffsetVector> = (0..6).map(|_| OffsetVector::from_array(std::array::from_fn(|_| rng.gen_range(-3.0..3.0)))).collect();
        let t: Vec<OffsetVector> = (0..6).map(|_| OffsetVector::from_array(std::array::from_fn(|_| rng.gen_range(-3.0..3.0)))).collect();
        let a = assignment(vec![0, 2, 0, 0, 1, 0]);
        let eval = |lg: &[f64], off: &[OffsetVector]| {
            multibox_loss(&ClassScores::from_logits(lg.to_vec(), cols), off, &a, &t, 1.5, 1.0).unwrap().total
        };
        let g = multibox_loss_with_grad(&ClassScores::from_logits(logits.clone(), cols), &o, &a, &t, 1.5, 1.0).unwrap();
        let h = 1e-6;
        for k in 0..logits.len() {
            let (mut up, mut dn) = (logits.clone(), logits.clone());
            up[k] += h;
            dn[k] -= h;
            let fd = (eval(&up, &o) - eval(&dn, &o)) / (2.0 * h);
            assert!((fd - g.d_logits[k]).abs() < 1e-7, "logit {k}: {fd} vs {}", g.d_logits[k]);
        }
        for i in 0..6 {
            for k in 0..4 {
                let bump = |d: f64| {
                    let mut off = o.clone();
                    let mut arr = off[i].to_array();
                    arr[k] += d;
                    off[i] = OffsetVector::from_array(arr);
                    eval(&logits, &off)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - g.d_offsets[i].to_array()[k]).abs() < 1e-7);
            }
        }
    }
}
