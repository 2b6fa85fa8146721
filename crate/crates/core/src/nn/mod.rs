//! Deterministic NCHW tensor engine with hand-written backward passes.
//!
//! Matrix products accumulate in the element type; reductions (normalization
//! statistics, pooling, losses, bias gradients) accumulate in `f64`. Work is split
//! into chunks determined by tensor shapes alone, so results do not depend on the
//! number of threads.

mod conv;
mod element;
mod gradcheck;
pub mod layers;
mod loss;
mod norm;
mod ops;
mod pool;
mod tensor;

pub use conv::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGeom, ConvGrads};
pub use element::Element;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{
    BatchNorm2d, Conv2d, ConvBn, ConvTranspose2d, DeconvBn, LinearBn, LinearBnCache, LinearLayer, Module, ParamKind,
};
pub use loss::{softmax_channels, weighted_cross_entropy};
pub use norm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BnCache, BnTrainOutput};
pub use ops::{
    add, add_assign, concat_channels, relu, relu_backward, split_channels, upsample_bilinear,
    upsample_bilinear_backward,
};
pub use pool::{adaptive_avg_pool2d, adaptive_avg_pool2d_backward, max_pool2d, max_pool2d_backward, MaxPoolOutput};
pub use tensor::Tensor;
