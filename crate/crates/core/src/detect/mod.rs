//! The detector: deterministic geometry, RoI pooling, the trainable network and checkpoints.

mod checkpoint;
mod geometry;
mod layers;
mod model;
mod roi;

use thiserror::Error;

pub(crate) use checkpoint::round_to_f32;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use geometry::{
    assign_targets, decode_box, encode_box, generate_anchors, iou, nms, nms_indices, Anchor, AnchorLabel, BBox,
    BoxDelta, Detection, MAX_LOG_SCALE,
};
pub use layers::{conv2d_backward, conv2d_forward, conv_out_size};
pub use model::{
    batch_loss_and_grad, build_model, forward_train, loss_and_grad, loss_and_grad_with_proposals, ArchConfig,
    DetectorModel, Gradients, Losses, NamedTensor, Sample, Targets,
};
pub use roi::{roi_pool, roi_pool_backward, RoiPoolOutput};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("box has non-positive width or height")]
    NonPositiveSize,
    #[error("RoI is empty after clipping to the feature map")]
    EmptyBox,
    #[error("invalid detector configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}
