//! Differentiable operations. Each one validates shapes, checks its output
//! for non-finite values, and records a backward rule when needed.

mod channels;
mod conv;
mod conv_direct;
mod elementwise;
mod filters;
mod linalg;
mod shape;

pub use channels::{normalize_channels, softmax_channels};
pub use conv::conv3d;
pub use elementwise::{
    add, add_channel_bias, add_scalar, div, exp, leaky_relu, log, mean, mul, neg, scale, square,
    steep_sigmoid, sub, sum,
};
pub use filters::{box_sum3d, forward_diff};
pub use linalg::{linear, matmul};
pub use shape::{concat, global_avg_pool, reshape, upsample_nearest2};
