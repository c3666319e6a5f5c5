//! Default boxes, ground-truth matching and the center-size box codec.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::dataset::Annotation;
use crate::error::DetectorError;

/// Center offsets are divided by this variance after normalizing by anchor size.
pub const CENTER_VARIANCE: f64 = 0.1;
/// Log size ratios are divided by this variance.
pub const SIZE_VARIANCE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    /// Anchor side as a fraction of the image side (geometric mean of w and h).
    pub scale: f64,
    /// Width over height.
    pub aspect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// The feature grid is `grid x grid` cells.
    pub grid: usize,
    pub shapes: Vec<AnchorShape>,
    /// IoU at or above which an anchor becomes positive for a ground truth.
    pub positive_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            grid: 8,
            shapes: vec![
                AnchorShape { scale: 0.20, aspect: 1.0 },
                AnchorShape { scale: 0.40, aspect: 1.0 },
                AnchorShape { scale: 0.30, aspect: 2.0 },
            ],
            positive_iou: 0.5,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.shapes.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.grid * self.grid * self.shapes.len()
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::Contract(format!("anchor config: {m}")));
        if self.grid == 0 || self.shapes.is_empty() {
            return bad("grid and shape list must be non-empty".into());
        }
        for s in &self.shapes {
            if !(s.scale > 0.0 && s.scale <= 1.0) || !(s.aspect > 0.0 && s.aspect.is_finite()) {
                return bad(format!("invalid shape {s:?}"));
            }
        }
        if !(self.positive_iou > 0.0 && self.positive_iou < 1.0) {
            return bad(format!("positive IoU {} outside (0, 1)", self.positive_iou));
        }
        Ok(())
    }
}

/// Anchors centered on each grid cell, clipped to the image. Ordered row-major
/// over cells, then by shape index.
pub fn generate_anchors(cfg: &AnchorConfig, image_width: usize, image_height: usize) -> Vec<BBox> {
    let (iw, ih) = (image_width as f64, image_height as f64);
    let (cw, ch) = (iw / cfg.grid as f64, ih / cfg.grid as f64);
    let mut out = Vec::with_capacity(cfg.anchor_count());
    for gy in 0..cfg.grid {
        for gx in 0..cfg.grid {
            let (cx, cy) = ((gx as f64 + 0.5) * cw, (gy as f64 + 0.5) * ch);
            for s in &cfg.shapes {
                let w = s.scale * iw * s.aspect.sqrt();
                let h = s.scale * ih / s.aspect.sqrt();
                let raw = BBox { xmin: cx - w / 2.0, ymin: cy - h / 2.0, xmax: cx + w / 2.0, ymax: cy + h / 2.0 };
                out.push(raw.clip(iw, ih).expect("anchor centers lie inside the image"));
            }
        }
    }
    out
}

/// Box regression target / prediction in center-size form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OffsetVector {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl OffsetVector {
    pub fn from_array(a: [f64; 4]) -> Self {
        OffsetVector { tx: a[0], ty: a[1], tw: a[2], th: a[3] }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }
}

pub fn encode_box(gt: &BBox, anchor: &BBox) -> Result<OffsetVector, DetectorError> {
    let (gw, gh) = (gt.width(), gt.height());
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(gw > 0.0 && gh > 0.0) {
        return Err(DetectorError::Encoding(format!("ground truth {gt:?} has no area")));
    }
    if !(aw > 0.0 && ah > 0.0) {
        return Err(DetectorError::Encoding(format!("anchor {anchor:?} has no area")));
    }
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    Ok(OffsetVector {
        tx: (gcx - acx) / aw / CENTER_VARIANCE,
        ty: (gcy - acy) / ah / CENTER_VARIANCE,
        tw: (gw / aw).ln() / SIZE_VARIANCE,
        th: (gh / ah).ln() / SIZE_VARIANCE,
    })
}

/// Inverse of [`encode_box`]. The result is not clipped and may be invalid for
/// extreme offsets; callers clip to the image.
pub fn decode_box(t: &OffsetVector, anchor: &BBox) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + t.tx * CENTER_VARIANCE * aw;
    let cy = acy + t.ty * CENTER_VARIANCE * ah;
    let w = aw * (t.tw * SIZE_VARIANCE).exp();
    let h = ah * (t.th * SIZE_VARIANCE).exp();
    BBox { xmin: cx - w / 2.0, ymin: cy - h / 2.0, xmax: cx + w / 2.0, ymax: cy + h / 2.0 }
}

/// Per-anchor labels after matching. Label 0 is background, `k + 1` is class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    pub labels: Vec<usize>,
    pub matched_gt: Vec<Option<usize>>,
    pub num_positive: usize,
}

impl MatchAssignment {
    /// The 0/1 indicator linking anchor `i` to ground truth `j`.
    pub fn indicator(&self, anchor: usize, gt: usize) -> u8 {
        u8::from(self.matched_gt[anchor] == Some(gt))
    }

    pub fn is_positive(&self, anchor: usize) -> bool {
        self.labels[anchor] != 0
    }
}

/// Two-step SSD matching. Each ground truth first claims its best still
/// unclaimed anchor (ties to the lowest index), so every ground truth ends up
/// with at least one anchor; then every other anchor whose best IoU reaches
/// `positive_iou` is matched to its argmax ground truth.
pub fn match_anchors(anchors: &[BBox], gts: &[Annotation], positive_iou: f64) -> MatchAssignment {
    let n = anchors.len();
    let mut matched_gt = vec![None; n];
    let ious: Vec<Vec<f64>> = gts.iter().map(|g| anchors.iter().map(|a| a.iou(&g.bbox)).collect()).collect();

    for (j, row) in ious.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if matched_gt[i].is_none() && best.is_none_or(|b| v > row[b]) {
                best = Some(i);
            }
        }
        if let Some(i) = best {
            matched_gt[i] = Some(j);
        }
    }

    for i in 0..n {
        if matched_gt[i].is_some() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, row) in ious.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[i] > b) {
                best = Some((j, row[i]));
            }
        }
        if let Some((j, v)) = best {
            if v >= positive_iou {
                matched_gt[i] = Some(j);
            }
        }
    }

    let labels: Vec<usize> = matched_gt.iter().map(|m| m.map_or(0, |j| gts[j].class_id + 1)).collect();
    let num_positive = labels.iter().filter(|&&l| l != 0).count();
    MatchAssignment { labels, matched_gt, num_positive }
}

/// Encoded regression targets for every positive anchor (zeros elsewhere).
pub fn encode_targets(
    anchors: &[BBox],
    gts: &[Annotation],
    assign: &MatchAssignment,
) -> Result<Vec<OffsetVector>, DetectorError> {
    anchors
        .iter()
        .zip(&assign.matched_gt)
        .map(|(a, m)| match m {
            Some(j) => encode_box(&gts[*j].bbox, a),
            None => Ok(OffsetVector::default()),
        })
        .collect()
}
