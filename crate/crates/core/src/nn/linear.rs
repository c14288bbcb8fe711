//! Fully connected layer (N,F) -> (N,O).

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// (out_features, in_features)
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

#[derive(Debug, Clone)]
pub struct LinearSaved<T> {
    input: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::new(super::init::kaiming_uniform(
                &[out_features, in_features],
                in_features,
                rng,
            )),
            bias: Parameter::new(Tensor::zeros(&[out_features])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, LinearSaved<T>)> {
        let (n, f) = input.dims2()?;
        if f != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "linear expects {} features, input has {f}",
                self.in_features()
            )));
        }
        let o = self.out_features();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let x = input.data();
        let mut out = Tensor::zeros(&[n, o]);
        for ni in 0..n {
            for oi in 0..o {
                let mut acc = b[oi];
                let row = &w[oi * f..(oi + 1) * f];
                for (wv, xv) in row.iter().zip(&x[ni * f..(ni + 1) * f]) {
                    acc += *wv * *xv;
                }
                out.data_mut()[ni * o + oi] = acc;
            }
        }
        Ok((
            out,
            LinearSaved {
                input: input.clone(),
            },
        ))
    }

    pub fn backward(&mut self, saved: &LinearSaved<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, f) = saved.input.dims2()?;
        let (gn, o) = grad_out.dims2()?;
        if gn != n || o != self.out_features() {
            return Err(Error::ShapeMismatch(format!(
                "linear backward: grad_out {:?} vs saved ({n}, {f})",
                grad_out.shape()
            )));
        }
        let w = self.weight.value.data();
        let x = saved.input.data();
        let g = grad_out.data();

        let gw = self.weight.grad.data_mut();
        let gb = self.bias.grad.data_mut();
        for ni in 0..n {
            for oi in 0..o {
                let gv = g[ni * o + oi];
                gb[oi] += gv;
                for fi in 0..f {
                    gw[oi * f + fi] += gv * x[ni * f + fi];
                }
            }
        }
        let mut grad_input = Tensor::zeros(&[n, f]);
        let gi = grad_input.data_mut();
        for ni in 0..n {
            for oi in 0..o {
                let gv = g[ni * o + oi];
                for fi in 0..f {
                    gi[ni * f + fi] += gv * w[oi * f + fi];
                }
            }
        }
        Ok(grad_input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn forward_matches_hand_computation() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut layer = Linear::<f64>::new(3, 2, &mut rng);
        layer.weight.value =
            Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        layer.bias.value = Tensor::from_vec(&[2], vec![10.0, -10.0]).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 1.0, 2.0]).unwrap();
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y.data(), &[10.0 + 1.0 + 2.0 + 6.0, -10.0 - 1.0 + 0.5]);
    }

    #[test]
    fn backward_shapes_and_bias_grad() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut layer = Linear::<f64>::new(4, 1, &mut rng);
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let (_, saved) = layer.forward(&x).unwrap();
        let g = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let gin = layer.backward(&saved, &g).unwrap();
        assert_eq!(gin.shape(), &[3, 4]);
        assert_eq!(layer.bias.grad.data(), &[6.0]);
    }
}
