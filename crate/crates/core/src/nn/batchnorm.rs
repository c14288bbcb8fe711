//! 3D batch normalization over (N, D, H, W) per channel.

use super::Mode;
use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Exec};
use crate::tensor::{Parameter, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct BatchNorm3d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    /// Normalized input x_hat (same shape as the input).
    x_hat: Tensor<T>,
    /// Per-channel 1/sqrt(var + eps) used by the forward pass.
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            gamma: Parameter::new(Tensor::full(&[channels], T::one())),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.shape()[0]
    }

    /// Train mode normalizes by batch statistics (biased variance) and
    /// updates running stats with momentum (unbiased variance, following
    /// the usual convention); eval mode uses the running stats.
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        exec: Exec,
    ) -> Result<(Tensor<T>, BnSaved<T>)> {
        let (n, c, d, h, w) = input.dims5()?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm has {} channels, input has {c}",
                self.channels()
            )));
        }
        let spatial = d * h * w;
        let m = n * spatial;
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::ShapeMismatch(
                        "batchnorm train mode needs at least 2 elements per channel".into(),
                    ));
                }
                let data = input.data();
                let stats = crate::exec::map_indexed(exec, c, |ci| {
                    let mut sum = T::zero();
                    let mut sum_sq = T::zero();
                    for ni in 0..n {
                        let ch = &data[(ni * c + ci) * spatial..][..spatial];
                        for &v in ch {
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mf = T::from_f64(m as f64);
                    let mean = sum / mf;
                    let var = (sum_sq / mf - mean * mean).max(T::zero());
                    (mean, var)
                });
                let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
                let var: Vec<T> = stats.iter().map(|s| s.1).collect();
                // running update: biased batch var rescaled to unbiased
                let mom = T::from_f64(self.momentum);
                let keep = T::one() - mom;
                let unbias = T::from_f64(m as f64 / (m as f64 - 1.0));
                for ci in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ci];
                    *rm = keep * *rm + mom * mean[ci];
                    let rv = &mut self.running_var.data_mut()[ci];
                    *rv = keep * *rv + mom * (var[ci] * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };

        let eps = T::from_f64(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let in_data = input.data();

        let mut x_hat = Tensor::zeros(input.shape());
        for_each_chunk(exec, x_hat.data_mut(), spatial, |slab_idx, slab| {
            let ci = slab_idx % c;
            let base = slab_idx * spatial;
            let (mu, is) = (mean[ci], inv_std[ci]);
            for (i, o) in slab.iter_mut().enumerate() {
                *o = (in_data[base + i] - mu) * is;
            }
        });
        let xh_data = x_hat.data();
        let mut out = Tensor::zeros(input.shape());
        for_each_chunk(exec, out.data_mut(), spatial, |slab_idx, slab| {
            let ci = slab_idx % c;
            let base = slab_idx * spatial;
            let (g, b) = (gamma[ci], beta[ci]);
            for (i, o) in slab.iter_mut().enumerate() {
                *o = g * xh_data[base + i] + b;
            }
        });
        Ok((
            out,
            BnSaved {
                x_hat,
                inv_std,
                mode,
            },
        ))
    }

    /// Accumulates gamma/beta gradients and returns grad w.r.t. the input.
    pub fn backward(
        &mut self,
        saved: &BnSaved<T>,
        grad_out: &Tensor<T>,
        exec: Exec,
    ) -> Result<Tensor<T>> {
        let (n, c, d, h, w) = grad_out.dims5()?;
        if grad_out.shape() != saved.x_hat.shape() {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm backward: grad_out {:?} vs saved {:?}",
                grad_out.shape(),
                saved.x_hat.shape()
            )));
        }
        let spatial = d * h * w;
        let m = T::from_f64((n * spatial) as f64);
        let g_data = grad_out.data();
        let xh = saved.x_hat.data();

        // per-channel reductions: sum(dy) and sum(dy * x_hat)
        let sums = crate::exec::map_indexed(exec, c, |ci| {
            let mut s = T::zero();
            let mut sx = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * spatial;
                for i in 0..spatial {
                    let dy = g_data[base + i];
                    s += dy;
                    sx += dy * xh[base + i];
                }
            }
            (s, sx)
        });
        for ci in 0..c {
            self.beta.grad.data_mut()[ci] += sums[ci].0;
            self.gamma.grad.data_mut()[ci] += sums[ci].1;
        }

        let gamma = self.gamma.value.data();
        let mut grad_input = Tensor::zeros(grad_out.shape());
        match saved.mode {
            Mode::Train => {
                for_each_chunk(exec, grad_input.data_mut(), spatial, |slab_idx, slab| {
                    let ci = slab_idx % c;
                    let base = slab_idx * spatial;
                    let scale = gamma[ci] * saved.inv_std[ci];
                    let mean_dy = sums[ci].0 / m;
                    let mean_dy_xhat = sums[ci].1 / m;
                    for (i, o) in slab.iter_mut().enumerate() {
                        let dy = g_data[base + i];
                        *o = scale * (dy - mean_dy - xh[base + i] * mean_dy_xhat);
                    }
                });
            }
            Mode::Eval => {
                // running stats are constants in eval mode
                for_each_chunk(exec, grad_input.data_mut(), spatial, |slab_idx, slab| {
                    let ci = slab_idx % c;
                    let base = slab_idx * spatial;
                    let scale = gamma[ci] * saved.inv_std[ci];
                    for (i, o) in slab.iter_mut().enumerate() {
                        *o = scale * g_data[base + i];
                    }
                });
            }
        }
        Ok(grad_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-3.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn train_mode_normalizes_to_unit_stats() {
        let x = random_input(&[2, 3, 4, 4, 4], 1);
        let mut bn = BatchNorm3d::<f64>::new(3);
        let (y, _) = bn.forward(&x, Mode::Train, Exec::Sequential).unwrap();
        let (n, c, d, h, w) = y.dims5().unwrap();
        let spatial = d * h * w;
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * spatial;
                for i in 0..spatial {
                    sum += y.data()[base + i];
                    sq += y.data()[base + i].powi(2);
                }
            }
            let m = (n * spatial) as f64;
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ci} var {var}");
        }
    }

    #[test]
    fn eval_mode_with_identity_stats_is_passthrough() {
        let x = random_input(&[1, 2, 3, 3, 3], 2);
        let mut bn = BatchNorm3d::<f64>::new(2);
        let (y, _) = bn.forward(&x, Mode::Eval, Exec::Sequential).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn train_mode_rejects_single_element() {
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1, 1]);
        let mut bn = BatchNorm3d::<f32>::new(2);
        assert!(bn.forward(&x, Mode::Train, Exec::Sequential).is_err());
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let x = random_input(&[4, 1, 2, 2, 2], 3);
        let mut bn = BatchNorm3d::<f64>::new(1);
        bn.forward(&x, Mode::Train, Exec::Sequential).unwrap();
        let m = 32.0;
        let mean: f64 = x.data().iter().sum::<f64>() / m;
        let var: f64 = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let expected_rm = 0.9 * 0.0 + 0.1 * mean;
        let expected_rv = 0.9 * 1.0 + 0.1 * var * (m / (m - 1.0));
        assert!((bn.running_mean.data()[0] - expected_rm).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - expected_rv).abs() < 1e-12);
    }

    #[test]
    fn parallel_matches_sequential() {
        let x = random_input(&[2, 4, 4, 4, 4], 4).cast::<f32>();
        let mut a = BatchNorm3d::<f32>::new(4);
        let mut b = BatchNorm3d::<f32>::new(4);
        let (ya, sa) = a.forward(&x, Mode::Train, Exec::Sequential).unwrap();
        let (yb, sb) = b.forward(&x, Mode::Train, Exec::Parallel).unwrap();
        assert_eq!(ya.data(), yb.data());
        assert_eq!(a.running_var.data(), b.running_var.data());
        let ga = a.backward(&sa, &ya, Exec::Sequential).unwrap();
        let gb = b.backward(&sb, &yb, Exec::Parallel).unwrap();
        assert_eq!(ga.data(), gb.data());
        assert_eq!(a.gamma.grad.data(), b.gamma.grad.data());
    }
}
