//! Channel concatenation and residual addition.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Concatenate along the channel axis of (N,C,D,H,W) tensors.
pub fn channel_concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, d, h, w) = a.dims5()?;
    let (nb, cb, db, hb, wb) = b.dims5()?;
    if (n, d, h, w) != (nb, db, hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "channel_concat: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let spatial = d * h * w;
    let mut out = Tensor::zeros(&[n, ca + cb, d, h, w]);
    let out_data = out.data_mut();
    for ni in 0..n {
        let dst = &mut out_data[ni * (ca + cb) * spatial..];
        dst[..ca * spatial].copy_from_slice(&a.data()[ni * ca * spatial..][..ca * spatial]);
        dst[ca * spatial..(ca + cb) * spatial]
            .copy_from_slice(&b.data()[ni * cb * spatial..][..cb * spatial]);
    }
    Ok(out)
}

/// Split the gradient of a concat back into the two inputs' gradients.
pub fn concat_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    ca: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, d, h, w) = grad_out.dims5()?;
    if ca >= c {
        return Err(Error::ShapeMismatch(format!(
            "concat_backward: split at {ca} of {c} channels"
        )));
    }
    let cb = c - ca;
    let spatial = d * h * w;
    let mut ga = Tensor::zeros(&[n, ca, d, h, w]);
    let mut gb = Tensor::zeros(&[n, cb, d, h, w]);
    for ni in 0..n {
        let src = &grad_out.data()[ni * c * spatial..];
        ga.data_mut()[ni * ca * spatial..][..ca * spatial]
            .copy_from_slice(&src[..ca * spatial]);
        gb.data_mut()[ni * cb * spatial..][..cb * spatial]
            .copy_from_slice(&src[ca * spatial..c * spatial]);
    }
    Ok((ga, gb))
}

/// Elementwise sum; backward passes the same gradient to both inputs.
pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "residual_add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_recovers_inputs() {
        let a = Tensor::from_vec(&[2, 2, 1, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let b =
            Tensor::from_vec(&[2, 3, 1, 2, 2], (100..124).map(|v| v as f64).collect()).unwrap();
        let cat = channel_concat(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[2, 5, 1, 2, 2]);
        let (ga, gb) = concat_backward(&cat, 2).unwrap();
        assert_eq!(ga.data(), a.data());
        assert_eq!(gb.data(), b.data());
    }

    #[test]
    fn residual_add_requires_same_shape() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 3, 2, 2, 2]);
        assert!(residual_add(&a, &b).is_err());
        let c = residual_add(&a, &a).unwrap();
        assert_eq!(c.shape(), a.shape());
    }
}
