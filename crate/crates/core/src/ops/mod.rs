//! Tensor plumbing shared by the losses and the reference network: im2col
//! convolution, separable resampling and numerically stable activations.

mod conv;
mod resample;

pub use conv::{conv2d, ConvGeometry};
pub use resample::{area_downsample, bilinear_resize, area_matrix, bilinear_matrix};

use candle_core::{Result, Tensor, D};

/// Softmax over the class axis (dim 1) of an `(N, C, H, W)` tensor.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(1)?)
}

/// Log-softmax over the class axis (dim 1).
pub fn channel_log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    x.relu()? + tail
}

/// `log σ(x)`, evaluated as `-softplus(-x)`.
pub fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    softplus(&x.neg()?)?.neg()
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.neg()?.exp()?.affine(1.0, 1.0)?.recip()
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.relu()? - x.neg()?.relu()?.affine(slope, 0.0)?
}

/// Binary cross-entropy with logits, elementwise:
/// `-(t log σ(x) + (1 - t) log(1 - σ(x)))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = log_sigmoid(logits)?;
    let neg = log_sigmoid(&logits.neg()?)?;
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    ((targets * pos)? + (one_minus_t * neg)?)?.neg()
}

/// Sums an `(N, C, H, W)` tensor over its spatial axes, giving `(N, C)`.
pub fn spatial_sum(x: &Tensor) -> Result<Tensor> {
    x.sum(D::Minus1)?.sum(D::Minus1)
}

/// Host copy of a rank-4 tensor as a flat `f64` vector.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    x.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()
}
