//! Current-frame fusion and the detection head: trajectory features are
//! scattered back onto the BEV grid, fused with the live feature map through
//! a conv + batch-norm + ReLU block, and decoded by anchor-based predictors
//! trained with a three-term loss.

pub mod anchors;
pub mod cbr;
pub mod head;
pub mod loss;
pub mod reproject;

pub use anchors::{
    assign_targets, decode_box, encode_box, AnchorConfig, AnchorError, AnchorTargets, ClassAnchor,
};
pub use cbr::{cbr_backward, fuse_cbr, init_cbr_params, CbrCtx};
pub use head::{decode_detections, head_backward, head_forward, init_head_params, nms_bev, HeadCtx, HeadOut};
pub use loss::{detection_loss, LossBreakdown, LossGrads, LossWeights};
pub use reproject::{reproject, reproject_backward, ReprojectCtx};
