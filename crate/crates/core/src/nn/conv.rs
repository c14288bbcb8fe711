//! Direct 3D cross-correlation (deep-learning convolution) with analytic
//! gradients.
//!
//! Forward parallelizes over (batch, out-channel) output slabs; the backward
//! input gradient over (batch, in-channel) slabs and the weight gradient over
//! out-channels. Each slab is owned by exactly one task and filled in a fixed
//! loop order. Stride-1 inner loops run as contiguous slice updates.

use super::valid_out_range;
use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Exec};
use crate::tensor::{Parameter, Scalar, Tensor};
use rand::Rng;

/// floor((len + 2*padding - k) / stride) + 1
pub fn conv3d_output_dim(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = len + 2 * padding;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "input extent {len} with padding {padding} is smaller than kernel {k}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_weight_shape<T: Scalar>(weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *weight.shape() {
        [k_out, c_in, kd, kh, kw] if kd == kh && kh == kw => Ok((k_out, c_in, kd)),
        ref other => Err(Error::ShapeMismatch(format!(
            "conv3d weight must be (K,C,k,k,k) with cubic kernel, got {:?}",
            other
        ))),
    }
}

pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    exec: Exec,
) -> Result<Tensor<T>> {
    let (n, c, d, h, w) = input.dims5()?;
    let (k_out, c_in, k) = check_weight_shape(weight)?;
    if c != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv3d input has {c} channels, weight expects {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::ShapeMismatch("conv3d stride must be >= 1".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [k_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv3d bias shape {:?}, expected [{k_out}]",
                b.shape()
            )));
        }
    }
    let od = conv3d_output_dim(d, k, stride, padding)?;
    let oh = conv3d_output_dim(h, k, stride, padding)?;
    let ow = conv3d_output_dim(w, k, stride, padding)?;

    let in_data = input.data();
    let w_data = weight.data();
    let out_spatial = od * oh * ow;
    let mut out = Tensor::zeros(&[n, k_out, od, oh, ow]);

    for_each_chunk(exec, out.data_mut(), out_spatial, |slab_idx, slab| {
        let ni = slab_idx / k_out;
        let ki = slab_idx % k_out;
        if let Some(b) = bias {
            let bv = b.data()[ki];
            slab.iter_mut().for_each(|v| *v = bv);
        }
        for ci in 0..c {
            let in_ch = &in_data[(ni * c + ci) * d * h * w..][..d * h * w];
            let w_ch = &w_data[(ki * c + ci) * k * k * k..][..k * k * k];
            for kd in 0..k {
                let (zlo, zhi) = valid_out_range(od, d, stride, padding, kd);
                for kh in 0..k {
                    let (ylo, yhi) = valid_out_range(oh, h, stride, padding, kh);
                    for kw in 0..k {
                        let (xlo, xhi) = valid_out_range(ow, w, stride, padding, kw);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w_ch[(kd * k + kh) * k + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        for zo in zlo..zhi {
                            let zi = zo * stride + kd - padding;
                            for yo in ylo..yhi {
                                let yi = yo * stride + kh - padding;
                                let out_row = &mut slab[(zo * oh + yo) * ow..][..ow];
                                let in_row = &in_ch[(zi * h + yi) * w..][..w];
                                if stride == 1 {
                                    let off = xlo + kw - padding;
                                    let src = &in_row[off..off + (xhi - xlo)];
                                    let dst = &mut out_row[xlo..xhi];
                                    for (o, &s) in dst.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                } else {
                                    for xo in xlo..xhi {
                                        let xi = xo * stride + kw - padding;
                                        out_row[xo] += wv * in_row[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. input, weight and bias.
pub fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    exec: Exec,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, c, d, h, w) = input.dims5()?;
    let (k_out, _, k) = check_weight_shape(weight)?;
    let (gn, gk, od, oh, ow) = grad_out.dims5()?;
    if gn != n || gk != k_out {
        return Err(Error::ShapeMismatch(format!(
            "conv3d grad_out shape {:?} inconsistent with input {:?} and weight {:?}",
            grad_out.shape(),
            input.shape(),
            weight.shape()
        )));
    }
    if od != conv3d_output_dim(d, k, stride, padding)?
        || oh != conv3d_output_dim(h, k, stride, padding)?
        || ow != conv3d_output_dim(w, k, stride, padding)?
    {
        return Err(Error::ShapeMismatch(
            "conv3d grad_out spatial dims do not match the forward call".into(),
        ));
    }

    let in_data = input.data();
    let w_data = weight.data();
    let g_data = grad_out.data();
    let in_spatial = d * h * w;
    let out_spatial = od * oh * ow;

    // grad_input: scatter grad_out through the kernel into the owned
    // (n, c) slab; fixed loop order keeps accumulation deterministic.
    let mut grad_input = Tensor::zeros(&[n, c, d, h, w]);
    for_each_chunk(exec, grad_input.data_mut(), in_spatial, |slab_idx, slab| {
        let ni = slab_idx / c;
        let ci = slab_idx % c;
        for ki in 0..k_out {
            let g_ch = &g_data[(ni * k_out + ki) * out_spatial..][..out_spatial];
            let w_ch = &w_data[(ki * c + ci) * k * k * k..][..k * k * k];
            for kd in 0..k {
                let (zlo, zhi) = valid_out_range(od, d, stride, padding, kd);
                for kh in 0..k {
                    let (ylo, yhi) = valid_out_range(oh, h, stride, padding, kh);
                    for kw in 0..k {
                        let (xlo, xhi) = valid_out_range(ow, w, stride, padding, kw);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w_ch[(kd * k + kh) * k + kw];
                        if wv == T::zero() {
                            continue;
                        }
                        for zo in zlo..zhi {
                            let zi = zo * stride + kd - padding;
                            for yo in ylo..yhi {
                                let yi = yo * stride + kh - padding;
                                let g_row = &g_ch[(zo * oh + yo) * ow..][..ow];
                                let in_row = &mut slab[(zi * h + yi) * w..][..w];
                                if stride == 1 {
                                    let off = xlo + kw - padding;
                                    let dst = &mut in_row[off..off + (xhi - xlo)];
                                    let src = &g_row[xlo..xhi];
                                    for (o, &s) in dst.iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                } else {
                                    for xo in xlo..xhi {
                                        let xi = xo * stride + kw - padding;
                                        in_row[xi] += wv * g_row[xo];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // grad_weight: each task owns the (C, k, k, k) slab of one out-channel.
    let mut grad_weight = Tensor::zeros(&[k_out, c, k, k, k]);
    for_each_chunk(exec, grad_weight.data_mut(), c * k * k * k, |ki, slab| {
        for ni in 0..n {
            let g_ch = &g_data[(ni * k_out + ki) * out_spatial..][..out_spatial];
            for ci in 0..c {
                let in_ch = &in_data[(ni * c + ci) * in_spatial..][..in_spatial];
                for kd in 0..k {
                    let (zlo, zhi) = valid_out_range(od, d, stride, padding, kd);
                    for kh in 0..k {
                        let (ylo, yhi) = valid_out_range(oh, h, stride, padding, kh);
                        for kw in 0..k {
                            let (xlo, xhi) = valid_out_range(ow, w, stride, padding, kw);
                            if xlo >= xhi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for zo in zlo..zhi {
                                let zi = zo * stride + kd - padding;
                                for yo in ylo..yhi {
                                    let yi = yo * stride + kh - padding;
                                    let g_row = &g_ch[(zo * oh + yo) * ow..][..ow];
                                    let in_row = &in_ch[(zi * h + yi) * w..][..w];
                                    if stride == 1 {
                                        let off = xlo + kw - padding;
                                        let a = &g_row[xlo..xhi];
                                        let b = &in_row[off..off + (xhi - xlo)];
                                        for (&ga, &ia) in a.iter().zip(b) {
                                            acc += ga * ia;
                                        }
                                    } else {
                                        for xo in xlo..xhi {
                                            let xi = xo * stride + kw - padding;
                                            acc += g_row[xo] * in_row[xi];
                                        }
                                    }
                                }
                            }
                            slab[(ci * k * k + kd * k + kh) * k + kw] += acc;
                        }
                    }
                }
            }
        }
    });

    let grad_bias = if has_bias {
        let mut gb = Tensor::zeros(&[k_out]);
        for_each_chunk(exec, gb.data_mut(), 1, |ki, cell| {
            let mut acc = T::zero();
            for ni in 0..n {
                let g_ch = &g_data[(ni * k_out + ki) * out_spatial..][..out_spatial];
                for &g in g_ch {
                    acc += g;
                }
            }
            cell[0] = acc;
        });
        Some(gb)
    } else {
        None
    };

    Ok((grad_input, grad_weight, grad_bias))
}

#[derive(Debug, Clone)]
pub struct Conv3d<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct Conv3dSaved<T> {
    input: Tensor<T>,
}

impl<T> Conv3dSaved<T> {
    /// The forward input, useful when the preceding op (e.g. ReLU) derives
    /// its own backward from the same tensor.
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }
}

impl<T: Scalar> Conv3d<T> {
    /// Kaiming-uniform weight init over fan_in = in_ch * k^3; zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = super::init::kaiming_uniform(&[out_ch, in_ch, k, k, k], in_ch * k * k * k, rng);
        Conv3d {
            weight: Parameter::new(weight),
            bias: bias.then(|| Parameter::new(Tensor::zeros(&[out_ch]))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, input: &Tensor<T>, exec: Exec) -> Result<(Tensor<T>, Conv3dSaved<T>)> {
        let out = conv3d_forward(
            input,
            &self.weight.value,
            self.bias.as_ref().map(|b| &b.value),
            self.stride,
            self.padding,
            exec,
        )?;
        Ok((
            out,
            Conv3dSaved {
                input: input.clone(),
            },
        ))
    }

    /// Accumulates parameter gradients and returns grad w.r.t. the input.
    pub fn backward(
        &mut self,
        saved: &Conv3dSaved<T>,
        grad_out: &Tensor<T>,
        exec: Exec,
    ) -> Result<Tensor<T>> {
        let (gin, gw, gb) = conv3d_backward(
            &saved.input,
            &self.weight.value,
            self.bias.is_some(),
            self.stride,
            self.padding,
            grad_out,
            exec,
        )?;
        self.weight.grad.add_assign(&gw)?;
        if let (Some(b), Some(gb)) = (self.bias.as_mut(), gb) {
            b.grad.add_assign(&gb)?;
        }
        Ok(gin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn output_dim_formula() {
        // (8 + 2*1 - 3)/2 + 1 = 4
        assert_eq!(conv3d_output_dim(8, 3, 2, 1).unwrap(), 4);
        assert_eq!(conv3d_output_dim(5, 3, 1, 1).unwrap(), 5);
        assert_eq!(conv3d_output_dim(1, 1, 1, 0).unwrap(), 1);
        assert!(conv3d_output_dim(2, 5, 1, 1).is_err());
    }

    #[test]
    fn identity_kernel_passthrough() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2, 2], (1..=8).map(|v| v as f32).collect())
            .unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv3d_forward(&x, &w, None, 1, 0, Exec::Sequential).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_sums_27() {
        // direct summation oracle: 3x3x3 ones kernel on constant 1 input
        let x = Tensor::<f32>::full(&[1, 1, 5, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d_forward(&x, &w, None, 1, 0, Exec::Sequential).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 27.0));
    }

    #[test]
    fn strided_output_shape() {
        let x = Tensor::<f32>::zeros(&[2, 1, 8, 8, 8]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let layer = Conv3d::<f32>::new(1, 4, 3, 2, 1, true, &mut rng);
        let (y, _) = layer.forward(&x, Exec::Sequential).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4, 4]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x: Tensor<f64> =
            super::super::init::kaiming_uniform(&[1, 2, 4, 4, 4], 8, &mut rng);
        let w: Tensor<f64> = super::super::init::kaiming_uniform(&[3, 2, 3, 3, 3], 54, &mut rng);
        let g = Tensor::zeros(&[1, 3, 4, 4, 4]);
        let (gin, gw, gb) = conv3d_backward(&x, &w, true, 1, 1, &g, Exec::Sequential).unwrap();
        assert!(gin.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_backward_is_passthrough() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2, 2], (1..=8).map(|v| v as f64).collect())
            .unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1, 1, 2, 2, 2], (11..=18).map(|v| v as f64).collect()).unwrap();
        let (gin, _, _) = conv3d_backward(&x, &w, false, 1, 0, &g, Exec::Sequential).unwrap();
        assert_eq!(gin.data(), g.data());
    }

    #[test]
    fn linearity_for_bias_free_layers() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let w: Tensor<f64> = super::super::init::kaiming_uniform(&[2, 2, 3, 3, 3], 54, &mut rng);
        let x1: Tensor<f64> = super::super::init::kaiming_uniform(&[1, 2, 5, 5, 5], 1, &mut rng);
        let x2: Tensor<f64> = super::super::init::kaiming_uniform(&[1, 2, 5, 5, 5], 1, &mut rng);
        let (a, b) = (1.7, -0.4);
        let mut combo = x1.map(|v| v * a);
        let x2b = x2.map(|v| v * b);
        combo.add_assign(&x2b).unwrap();
        let y_combo = conv3d_forward(&combo, &w, None, 1, 1, Exec::Sequential).unwrap();
        let y1 = conv3d_forward(&x1, &w, None, 1, 1, Exec::Sequential).unwrap();
        let y2 = conv3d_forward(&x2, &w, None, 1, 1, Exec::Sequential).unwrap();
        for i in 0..y_combo.numel() {
            let expect = a * y1.data()[i] + b * y2.data()[i];
            assert!((y_combo.data()[i] - expect).abs() <= 1e-6 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x: Tensor<f32> = super::super::init::kaiming_uniform(&[2, 3, 6, 6, 6], 1, &mut rng);
        let w: Tensor<f32> = super::super::init::kaiming_uniform(&[4, 3, 3, 3, 3], 81, &mut rng);
        let b: Tensor<f32> = super::super::init::kaiming_uniform(&[4], 4, &mut rng);
        for stride in [1, 2] {
            let ys = conv3d_forward(&x, &w, Some(&b), stride, 1, Exec::Sequential).unwrap();
            let yp = conv3d_forward(&x, &w, Some(&b), stride, 1, Exec::Parallel).unwrap();
            assert_eq!(ys.data(), yp.data());
            let gs = conv3d_backward(&x, &w, true, stride, 1, &ys, Exec::Sequential).unwrap();
            let gp = conv3d_backward(&x, &w, true, stride, 1, &ys, Exec::Parallel).unwrap();
            assert_eq!(gs.0.data(), gp.0.data());
            assert_eq!(gs.1.data(), gp.1.data());
            assert_eq!(gs.2.unwrap().data(), gp.2.unwrap().data());
        }
    }
}
