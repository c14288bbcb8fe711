//! Elementwise activations.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Backward from the forward *output*: gradient passes where output > 0.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("relu backward shapes differ".into()));
    }
    let mut g = grad_out.clone();
    for (gv, &ov) in g.data_mut().iter_mut().zip(output.data()) {
        if ov <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Backward from the forward output: dx = dy * y * (1 - y).
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("sigmoid backward shapes differ".into()));
    }
    let mut g = grad_out.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
        *gv = *gv * y * (T::one() - y);
    }
    Ok(g)
}
