//! Minimal tensor and layer library with hand-written backward passes.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod receptive;
pub mod tensor;

pub use layers::{
    concat_channels, conv2d, conv2d_backward, masked_bce_grad_logits, masked_bce_loss, maxpool2,
    maxpool2_backward, pointwise, pointwise_backward, split_channels, upsample_bilinear2,
    upsample_bilinear2_backward, Pointwise,
};
pub use optim::{optimizer_step, OptimState, OptimizerKind, PlateauState};
pub use receptive::RfGraph;
pub use tensor::{Scalar, Tensor};
