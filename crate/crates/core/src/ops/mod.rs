//! Forward kernels and their hand-derived backward passes.
//!
//! Every kernel is a plain function over [`crate::tensor::Tensor`] values;
//! the autodiff tape composes them. Forward kernels report executed work to
//! [`crate::meter`] when a meter is active.

pub mod conv;
pub mod elementwise;
pub mod matrix;
pub mod norm;
pub mod pool;
pub mod resize;

pub use conv::{conv2d, conv2d_backward, conv2d_flops};
pub use elementwise::{
    add, mul_broadcast, mul_broadcast_backward, relu, relu_backward, rsqrt, rsqrt_backward, scale,
    sigmoid, sigmoid_backward,
};
pub use matrix::{
    add_identity, matmul, matmul_backward, row_sum, row_sum_backward, softmax_rows,
    softmax_rows_backward, transpose,
};
pub use norm::{
    batch_norm_eval, batch_norm_eval_backward, batch_norm_train, batch_norm_train_backward,
    BnSaved, BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{
    adaptive_avg_pool, adaptive_avg_pool_backward, adaptive_avg_pool_flops, global_avg_pool,
    global_avg_pool_backward,
};
pub use resize::{bilinear_resize, bilinear_resize_backward};
