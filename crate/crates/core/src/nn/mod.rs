//! Layer kernels with explicit forward/backward pairs, the SGDM optimizer
//! and a central-difference gradient checker.

mod activation;
mod conv;
mod dense;
mod gradcheck;
mod loss;
mod lrn;
mod optim;
mod pool;

pub use activation::{global_avg_pool, relu, relu_backward};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseGrads, DenseParams};
pub use gradcheck::finite_diff_check;
pub use loss::{softmax, softmax_xent, SoftmaxXent};
pub use lrn::{local_response_norm, local_response_norm_backward, LrnParams};
pub use optim::{sgdm_step, OptimizerState, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM};
pub use pool::{maxpool2d, maxpool2d_backward, MaxPoolOutput};

pub(crate) mod kernels {
    pub(crate) use super::activation::{gap_backward_slice, gap_slice, relu_backward_slice, relu_slice};
    pub(crate) use super::conv::{backward_slice as conv_backward, forward_slice as conv_forward};
    pub(crate) use super::dense::{backward_batch as dense_backward, forward_batch as dense_forward};
    pub(crate) use super::lrn::{backward_slice as lrn_backward, forward_slice as lrn_forward};
    pub(crate) use super::pool::{
        backward_slice as pool_backward, check_pool, forward_slice as pool_forward,
    };
}
