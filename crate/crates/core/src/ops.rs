//! Differentiable tensor helpers shared by the networks and the losses.
//!
//! Everything here is composed from primitive tensor ops so gradients are
//! available through the autograd graph, and stays finite at the usual
//! singular points (zero-length vectors, large logits).

use candle_core::{Tensor, D};

use crate::error::Result;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg = x.neg()?.relu()?;
    Ok((pos - (neg * slope)?)?)
}

/// Logistic function written through `tanh`, whose derivative never overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `log(1 + exp(x))` evaluated as `max(x, 0) + log(1 + exp(−|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Square root of a non-negative tensor with a zero (sub)gradient where the
/// input is exactly zero, instead of the `0·∞` NaN of a bare `sqrt`.
pub fn safe_sqrt(sq: &Tensor) -> Result<Tensor> {
    let positive = sq.gt(0.0)?;
    let ones = sq.ones_like()?;
    let guarded = positive.where_cond(sq, &ones)?.sqrt()?;
    Ok((guarded * positive.to_dtype(sq.dtype())?)?)
}

/// Per-pixel Euclidean norm over the channel axis of an `N×C×H×W` tensor,
/// keeping a singleton channel axis.
pub fn channel_norm(x: &Tensor) -> Result<Tensor> {
    safe_sqrt(&x.sqr()?.sum_keepdim(1)?)
}

/// Bilinear ×2 upsampling with half-pixel centers and edge replication.
///
/// Output sample `2i` mixes input `i` and `i − 1` with weights 3/4 and 1/4,
/// sample `2i + 1` mixes `i` and `i + 1`; applied separably.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let x = upsample2x_axis(x, 3)?;
    upsample2x_axis(&x, 2)
}

fn upsample2x_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let n = x.dim(axis)?;
    let (prev, next) = if n == 1 {
        (x.clone(), x.clone())
    } else {
        let first = x.narrow(axis, 0, 1)?;
        let last = x.narrow(axis, n - 1, 1)?;
        let prev = Tensor::cat(&[&first, &x.narrow(axis, 0, n - 1)?], axis)?;
        let next = Tensor::cat(&[&x.narrow(axis, 1, n - 1)?, &last], axis)?;
        (prev, next)
    };
    let center = (x * 0.75)?;
    let even = (&center + (prev * 0.25)?)?;
    let odd = (&center + (next * 0.25)?)?;
    let mut dims = x.dims().to_vec();
    dims[axis] *= 2;
    Ok(Tensor::stack(&[even, odd], axis + 1)?.reshape(dims)?)
}

/// Mean over every element except the batch axis, one value per element.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    Ok(x.reshape((n, ()))?.mean(D::Minus1)?)
}
