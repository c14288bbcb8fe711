//! Neural-network layers with hand-derived backward passes.
//!
//! There is no graph engine: every forward returns the tensors its backward
//! needs, and the static model topologies chain them explicitly. Gradient
//! accumulation always runs in a fixed order, so results are independent of
//! the execution strategy and thread count.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod merge;
pub mod pool;

pub use activation::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use batchnorm::{BatchNorm3d, BnSaved};
pub use conv::{conv3d_backward, conv3d_forward, conv3d_output_dim, Conv3d, Conv3dSaved};
pub use linear::{Linear, LinearSaved};
pub use merge::{channel_concat, concat_backward, residual_add};
pub use pool::{
    avgpool3d_backward, avgpool3d_forward, global_avg_pool_backward, global_avg_pool_forward,
    maxpool3d_backward, maxpool3d_forward, MaxPoolSaved,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Valid output-index range [lo, hi) along one axis for a kernel offset:
/// the set of `o` with `0 <= o*stride - padding + koff < input_len`.
#[inline]
pub(crate) fn valid_out_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    padding: usize,
    koff: usize,
) -> (usize, usize) {
    let lo = if koff >= padding {
        0
    } else {
        (padding - koff).div_ceil(stride)
    };
    let last_in = in_len as i64 - 1 + padding as i64 - koff as i64;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = ((last_in as usize) / stride + 1).min(out_len);
    (lo, hi.max(lo))
}
