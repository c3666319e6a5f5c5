use serde::{Deserialize, Serialize};

use super::anchors::{decode_box, generate_anchors};
use super::network::{forward, ModelState};
use crate::dataset::Detection;
use crate::error::DetectorError;
use crate::imaging::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { conf_threshold: 0.05, nms_iou: 0.45, max_detections: 100 }
    }
}

fn by_confidence(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence.total_cmp(&a.confidence)
}

/// Greedy per-class suppression: walking down by confidence (stable for
/// ties), drop any box overlapping an already kept box of its class by more
/// than `iou`.
pub fn nms(mut candidates: Vec<Detection>, iou: f64) -> Vec<Detection> {
    candidates.sort_by(by_confidence);
    let mut kept: Vec<Detection> = Vec::new();
    for d in candidates {
        if kept.iter().all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou) {
            kept.push(d);
        }
    }
    kept
}

pub fn predict(model: &ModelState, img: &Image, cfg: &PredictConfig) -> Result<Vec<Detection>, DetectorError> {
    let out = forward(model, img)?;
    let (w, h) = (img.width() as f64, img.height() as f64);
    let anchors = generate_anchors(&model.arch.anchors, img.width(), img.height());
    let mut candidates = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let probs = out.scores.row(i);
        if probs[1..].iter().all(|&p| p < cfg.conf_threshold) {
            continue;
        }
        let Some(bbox) = decode_box(&out.offsets[i], anchor).clip(w, h) else { continue };
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p >= cfg.conf_threshold {
                candidates.push(Detection { bbox, class_id: c - 1, confidence: p });
            }
        }
    }
    let mut kept = nms(candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}
