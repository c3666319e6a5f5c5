//! Batch gradients and the SGD loop.

use std::hash::{DefaultHasher, Hasher};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::anchors::{encode_targets, generate_anchors, match_anchors, MatchAssignment, OffsetVector};
use super::loss::{multibox_loss_with_grad, LossBreakdown, PROB_FLOOR};
use super::network::{backward, forward_cached, ForwardCache, ModelState};
use crate::dataset::{Annotation, DatasetManifest};
use crate::error::DetectorError;
use crate::imaging::{read_image, Image};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub alpha: f64,
    pub hard_negative_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 1000,
            alpha: 1.0,
            hard_negative_ratio: 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size >= 1
            && self.alpha >= 0.0
            && self.alpha.is_finite()
            && self.hard_negative_ratio >= 0.0
            && self.hard_negative_ratio.is_finite();
        if ok {
            Ok(())
        } else {
            Err(DetectorError::Contract(format!("invalid training config {self:?}")))
        }
    }

    /// The same recipe at a tenth of the learning rate, the default for
    /// fine-tuning.
    pub fn fine_tune_default(&self) -> TrainConfig {
        TrainConfig { learning_rate: self.learning_rate / 10.0, ..self.clone() }
    }
}

/// An image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

/// A sample with its anchor assignment and regression targets resolved.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    image: Image,
    assign: MatchAssignment,
    targets: Vec<OffsetVector>,
}

pub fn prepare(model: &ModelState, samples: &[Sample]) -> Result<Vec<PreparedSample>, DetectorError> {
    let size = model.arch.input_size;
    let anchors = generate_anchors(&model.arch.anchors, size, size);
    samples
        .iter()
        .map(|s| {
            if let Some(a) = s.annotations.iter().find(|a| a.class_id >= model.arch.num_classes) {
                return Err(DetectorError::Contract(format!("class id {} outside the model's class set", a.class_id)));
            }
            let assign = match_anchors(&anchors, &s.annotations, model.arch.anchors.positive_iou);
            let targets = encode_targets(&anchors, &s.annotations, &assign)?;
            Ok(PreparedSample { image: s.image.clone(), assign, targets })
        })
        .collect()
}

/// Mean multibox loss over the batch and its gradient.
pub struct BatchGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub per_image: Vec<LossBreakdown>,
}

pub fn loss_gradient(model: &ModelState, batch: &[Sample], cfg: &TrainConfig) -> Result<BatchGradient, DetectorError> {
    let prepared = prepare(model, batch)?;
    let refs: Vec<&PreparedSample> = prepared.iter().collect();
    let mut cache = ForwardCache::default();
    prepared_gradient(model, &refs, cfg, &mut cache)
}

fn prepared_gradient(
    model: &ModelState,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    cache: &mut ForwardCache,
) -> Result<BatchGradient, DetectorError> {
    if batch.is_empty() {
        return Err(DetectorError::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut gradient = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let mut per_image = Vec::with_capacity(batch.len());
    for (index, s) in batch.iter().enumerate() {
        let out = forward_cached(model, &s.image, cache)?;
        let l = multibox_loss_with_grad(&out.scores, &out.offsets, &s.assign, &s.targets, cfg.alpha, cfg.hard_negative_ratio)?;
        if !l.breakdown.total.is_finite() {
            return Err(DetectorError::NonFiniteLoss { index });
        }
        loss += scale * l.breakdown.total;
        if l.breakdown.num_positive > 0 {
            backward(model, cache, &l.d_logits, &l.d_offsets, scale, &mut gradient);
        }
        per_image.push(l.breakdown);
    }
    Ok(BatchGradient { loss, gradient, per_image })
}

/// Mean batch loss together with a fingerprint of every discrete choice made
/// while computing it: ReLU and pooling pattern, mined negatives,
/// smooth-L1 branches and probability-floor hits. The loss is a smooth
/// function of the parameters on any set where the fingerprint is constant.
pub fn loss_with_region(model: &ModelState, batch: &[Sample], cfg: &TrainConfig) -> Result<(f64, u64), DetectorError> {
    let prepared = prepare(model, batch)?;
    let mut cache = ForwardCache::default();
    let mut h = DefaultHasher::new();
    let mut loss = 0.0;
    for (index, s) in prepared.iter().enumerate() {
        let out = forward_cached(model, &s.image, &mut cache)?;
        let l = multibox_loss_with_grad(&out.scores, &out.offsets, &s.assign, &s.targets, cfg.alpha, cfg.hard_negative_ratio)?;
        if !l.breakdown.total.is_finite() {
            return Err(DetectorError::NonFiniteLoss { index });
        }
        loss += l.breakdown.total / prepared.len() as f64;
        cache.region_hash(&mut h);
        for &n in &l.negatives {
            h.write_usize(n);
        }
        for (i, (o, t)) in out.offsets.iter().zip(&s.targets).enumerate() {
            if s.assign.is_positive(i) {
                for (a, b) in o.to_array().iter().zip(t.to_array()) {
                    h.write_u8(u8::from((a - b).abs() < 1.0));
                }
                h.write_u8(u8::from(out.scores.row(i)[s.assign.labels[i]] > PROB_FLOOR));
            }
        }
        for &i in &l.negatives {
            h.write_u8(u8::from(out.scores.row(i)[0] > PROB_FLOOR));
        }
    }
    Ok((loss, h.finish()))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    /// Mean batch loss before each update.
    pub loss_trace: Vec<f64>,
}

pub fn load_samples(data: &DatasetManifest) -> Result<Vec<Sample>, DetectorError> {
    data.records
        .iter()
        .map(|r| Ok(Sample { image: read_image(&r.image_path)?, annotations: r.annotations.clone() }))
        .collect()
}

pub fn train(model: &ModelState, data: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome, DetectorError> {
    if data.class_set != model.class_set {
        return Err(DetectorError::Contract(format!(
            "dataset classes {:?} differ from model classes {:?}",
            data.class_set.names(),
            model.class_set.names()
        )));
    }
    train_samples(model, &load_samples(data)?, cfg)
}

/// Continued training from an already trained model. Mechanically identical
/// to [`train`]; callers usually pass [`TrainConfig::fine_tune_default`].
pub fn fine_tune(model: &ModelState, target: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome, DetectorError> {
    train(model, target, cfg)
}

/// SGD over seeded shuffled batches. Batches are drawn from a per-epoch
/// permutation of the samples; a batch may straddle two epochs.
pub fn train_samples(model: &ModelState, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome, DetectorError> {
    cfg.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(DetectorError::Contract("training set is empty".into()));
    }
    let prepared = prepare(model, samples)?;
    let mut model = model.clone();
    let mut loss_trace = Vec::with_capacity(cfg.steps as usize);
    let mut cache = ForwardCache::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng::stream(cfg.seed, &format!("epoch-{epoch}")));
                epoch += 1;
                cursor = 0;
            }
            batch.push(&prepared[order[cursor]]);
            cursor += 1;
        }
        let g = match prepared_gradient(&model, &batch, cfg, &mut cache) {
            Err(DetectorError::NonFiniteLoss { .. }) => return Err(DetectorError::Divergence { step }),
            other => other?,
        };
        loss_trace.push(g.loss);
        for (p, d) in model.params.iter_mut().zip(&g.gradient) {
            *p -= cfg.learning_rate * d;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(DetectorError::Divergence { step });
        }
        model.step += 1;
    }
    Ok(TrainOutcome { model, loss_trace })
}

/// Mean multibox loss of the model over the samples.
pub fn dataset_loss(model: &ModelState, samples: &[Sample], cfg: &TrainConfig) -> Result<f64, DetectorError> {
    let prepared = prepare(model, samples)?;
    let mut cache = ForwardCache::default();
    let mut total = 0.0;
    for chunk in prepared.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        total += prepared_gradient_loss_only(model, &refs, cfg, &mut cache)? * chunk.len() as f64;
    }
    Ok(total / prepared.len().max(1) as f64)
}

fn prepared_gradient_loss_only(
    model: &ModelState,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    cache: &mut ForwardCache,
) -> Result<f64, DetectorError> {
    let mut loss = 0.0;
    for (index, s) in batch.iter().enumerate() {
        let out = forward_cached(model, &s.image, cache)?;
        let l = multibox_loss_with_grad(&out.scores, &out.offsets, &s.assign, &s.targets, cfg.alpha, cfg.hard_negative_ratio)?;
        if !l.breakdown.total.is_finite() {
            return Err(DetectorError::NonFiniteLoss { index });
        }
        loss += l.breakdown.total;
    }
    Ok(loss / batch.len() as f64)
}
