//! A small single-shot multibox detector trained from scratch.

pub mod anchors;
pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod predict;
pub mod train;

pub use anchors::{
    decode_box, encode_box, generate_anchors, match_anchors, AnchorConfig, AnchorShape, MatchAssignment, OffsetVector,
};
pub use checkpoint::{load_model, load_model_for, save_model};
pub use loss::{cross_entropy, multibox_loss, smooth_l1, ClassScores, LossBreakdown};
pub use network::{forward, Architecture, ModelState, NetworkOutput};
pub use predict::{nms, predict, PredictConfig};
pub use train::{
    dataset_loss, fine_tune, load_samples, loss_gradient, loss_with_region, train, train_samples, Sample, TrainConfig,
    TrainOutcome,
};
