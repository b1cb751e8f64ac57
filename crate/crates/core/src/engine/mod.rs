//! Minimal dense-tensor engine with reverse-mode automatic
//! differentiation and explicit retained-activation accounting.

mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod scalar;
mod tensor;

pub use gradcheck::{gradcheck, GradCheckReport};
pub use graph::{
    activation_stats, conv_evals, op_evals, reset_peak_stats, with_kink_trace, with_no_grad,
    ActivationStats, NoGrad,
};
pub use ops::{
    add, backward, concat_channels, conv2d, conv_transpose2d, cross_entropy_with_softmax,
    instance_norm, leaky_relu, max_pool2d, mul, soft_dice_with_softmax, softmax_channels,
    sum_all,
};
pub use scalar::Scalar;
pub use tensor::{Tensor, Tensor32, Tensor64};
