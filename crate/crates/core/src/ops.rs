//! Untaped convenience forms of the layer operations.

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeometry, Padding};
use crate::kernels::dense;
use crate::kernels::pool;
use crate::tensor::{Element, Tensor};

pub use crate::kernels::conv::conv2d;

/// Pointwise channel mixing with a `[F,C,1,1]` kernel.
pub fn conv1x1<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, kh, kw) = kernel.dims4("conv1x1")?;
    if (kh, kw) != (1, 1) {
        return Err(Error::shape(
            "conv1x1",
            format!("kernel spatial extent must be 1×1, got {kh}×{kw}"),
        ));
    }
    conv::conv2d(input, kernel, Some(bias), ConvGeometry::valid())
}

/// Depthwise-separable convolution: `depth_kernel [C,k,k]` filters each
/// channel on its own, then `point_kernel [F,C,1,1]` mixes channels.
pub fn depthwise_separable_conv2d<T: Element>(
    input: &Tensor<T>,
    depth_kernel: &Tensor<T>,
    point_kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let depth = conv::depthwise_conv2d(input, depth_kernel, ConvGeometry::new(1, padding, 1))?;
    conv1x1(&depth, point_kernel, bias)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// 2×2 max pooling with stride 2.
pub fn max_pool2d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    pool::max_pool2d(x, 2, 2).map(|(y, _)| y)
}

pub use crate::kernels::pool::global_avg_pool;

/// Affine map followed by a numerically stable softmax.
pub fn dense_softmax<T: Element>(x: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let k = weights.shape().first().copied().unwrap_or(0);
    if k < 2 {
        return Err(Error::shape("dense_softmax", format!("need at least 2 classes, got {k}")));
    }
    dense::softmax(&dense::linear(x, weights, bias)?)
}

pub use crate::kernels::dense::{cce_loss, one_hot};
