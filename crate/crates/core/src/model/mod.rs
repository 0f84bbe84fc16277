//! Compact residual CNN with hand-written backpropagation.

mod adam;
mod layers;
mod loss;
mod network;
mod objective;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{Activation, BatchNorm, Conv2d};
pub use loss::{sigmoid, weighted_bce, weighted_bce_logit, BceTerm};
pub use network::{Aggregation, Cache, Forward, Gradients, Mode, Model, ModelConfig};
pub use objective::{
    group_argmax, max_over_slices_step, predict_max_batch, predict_multi, predict_volume_max, slice_label_step,
    stacked_step, StepResult, VolumePrediction,
};
pub use scalar::Scalar;
pub use tensor::Tensor4;
