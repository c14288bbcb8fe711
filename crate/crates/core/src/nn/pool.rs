//! Pooling ops: 2x max pool, 2x average pool, global average pool.

use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, Exec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct MaxPoolSaved {
    /// Winning input linear index for every output element; ties resolve to
    /// the lowest linear index so gradient routing is deterministic.
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

fn pooled_dims(d: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
    if d < 2 || h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "2x pooling needs spatial dims >= 2, got ({d},{h},{w})"
        )));
    }
    Ok((d / 2, h / 2, w / 2))
}

/// Max pool with kernel 2, stride 2 (trailing odd voxels are dropped).
pub fn maxpool3d_forward<T: Scalar>(
    input: &Tensor<T>,
    exec: Exec,
) -> Result<(Tensor<T>, MaxPoolSaved)> {
    let (n, c, d, h, w) = input.dims5()?;
    let (od, oh, ow) = pooled_dims(d, h, w)?;
    let in_data = input.data();
    let out_spatial = od * oh * ow;

    // pass 1: winning indices (channel-relative), pass 2: gather values
    let mut argmax = vec![0usize; n * c * out_spatial];
    for_each_chunk(exec, &mut argmax, out_spatial, |slab_idx, am| {
        let base = slab_idx * d * h * w;
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((zo * 2 + dz) * h + yo * 2 + dy) * w + xo * 2 + dx;
                                let v = in_data[base + idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    am[(zo * oh + yo) * ow + xo] = best_idx;
                }
            }
        }
    });
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    for_each_chunk(exec, out.data_mut(), out_spatial, |slab_idx, slab| {
        let base = slab_idx * d * h * w;
        let am = &argmax[slab_idx * out_spatial..][..out_spatial];
        for (o, &idx) in slab.iter_mut().zip(am) {
            *o = in_data[base + idx];
        }
    });
    Ok((
        out,
        MaxPoolSaved {
            argmax,
            in_shape: vec![n, c, d, h, w],
        },
    ))
}

pub fn maxpool3d_backward<T: Scalar>(
    saved: &MaxPoolSaved,
    grad_out: &Tensor<T>,
    exec: Exec,
) -> Result<Tensor<T>> {
    let (n, c, d, h, w) = {
        let s = &saved.in_shape;
        (s[0], s[1], s[2], s[3], s[4])
    };
    let out_spatial = grad_out.numel() / (n * c);
    if grad_out.numel() != saved.argmax.len() {
        return Err(Error::ShapeMismatch(
            "maxpool backward: grad_out does not match saved forward".into(),
        ));
    }
    let g = grad_out.data();
    let mut grad_input = Tensor::zeros(&[n, c, d, h, w]);
    for_each_chunk(exec, grad_input.data_mut(), d * h * w, |slab_idx, slab| {
        let out_base = slab_idx * out_spatial;
        for i in 0..out_spatial {
            slab[saved.argmax[out_base + i]] += g[out_base + i];
        }
    });
    Ok(grad_input)
}

/// Average pool with kernel 2, stride 2.
pub fn avgpool3d_forward<T: Scalar>(input: &Tensor<T>, exec: Exec) -> Result<Tensor<T>> {
    let (n, c, d, h, w) = input.dims5()?;
    let (od, oh, ow) = pooled_dims(d, h, w)?;
    let in_data = input.data();
    let eighth = T::from_f64(0.125);
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    for_each_chunk(exec, out.data_mut(), od * oh * ow, |slab_idx, slab| {
        let base = slab_idx * d * h * w;
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = T::zero();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += in_data
                                    [base + ((zo * 2 + dz) * h + yo * 2 + dy) * w + xo * 2 + dx];
                            }
                        }
                    }
                    slab[(zo * oh + yo) * ow + xo] = acc * eighth;
                }
            }
        }
    });
    Ok(out)
}

pub fn avgpool3d_backward<T: Scalar>(
    in_shape: &[usize],
    grad_out: &Tensor<T>,
    exec: Exec,
) -> Result<Tensor<T>> {
    let (n, c, d, h, w) = (
        in_shape[0],
        in_shape[1],
        in_shape[2],
        in_shape[3],
        in_shape[4],
    );
    let (_, _, od, oh, ow) = grad_out.dims5()?;
    let g = grad_out.data();
    let eighth = T::from_f64(0.125);
    let mut grad_input = Tensor::zeros(&[n, c, d, h, w]);
    for_each_chunk(exec, grad_input.data_mut(), d * h * w, |slab_idx, slab| {
        let out_base = slab_idx * od * oh * ow;
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let gv = g[out_base + (zo * oh + yo) * ow + xo] * eighth;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                slab[((zo * 2 + dz) * h + yo * 2 + dy) * w + xo * 2 + dx] += gv;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(grad_input)
}

/// (N,C,D,H,W) -> (N,C) spatial mean.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, d, h, w) = input.dims5()?;
    let spatial = d * h * w;
    let inv = T::one() / T::from_f64(spatial as f64);
    let data = input.data();
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        let mut acc = T::zero();
        for &v in &data[i * spatial..(i + 1) * spatial] {
            acc += v;
        }
        out.data_mut()[i] = acc * inv;
    }
    Ok(out)
}

/// Distributes grad/(D*H*W) uniformly over each channel's voxels.
pub fn global_avg_pool_backward<T: Scalar>(
    in_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let spatial = in_shape[2] * in_shape[3] * in_shape[4];
    let inv = T::one() / T::from_f64(spatial as f64);
    let g = grad_out.data();
    let mut grad_input = Tensor::zeros(in_shape);
    for (i, chunk) in grad_input.data_mut().chunks_mut(spatial).enumerate() {
        let gv = g[i] * inv;
        chunk.iter_mut().for_each(|v| *v = gv);
    }
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_unique_max() {
        let mut data = vec![0.0f64; 64];
        data[1 + 4 * (2 + 4 * 3)] = 9.0; // unique max at (1,2,3)
        let x = Tensor::from_vec(&[1, 1, 4, 4, 4], data).unwrap();
        let (y, saved) = maxpool3d_forward(&x, Exec::Sequential).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        let g = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let gin = maxpool3d_backward(&saved, &g, Exec::Sequential).unwrap();
        // the window holding the max receives its gradient at the max voxel
        assert_eq!(gin.data()[1 + 4 * (2 + 4 * 3)], 1.0);
        // total gradient mass is preserved
        let total: f64 = gin.data().iter().sum();
        assert_eq!(total, 8.0);
    }

    #[test]
    fn maxpool_ties_break_to_lowest_index() {
        let x = Tensor::from_vec(&[1, 1, 2, 2, 2], vec![5.0f64; 8]).unwrap();
        let (_, saved) = maxpool3d_forward(&x, Exec::Sequential).unwrap();
        assert_eq!(saved.argmax, vec![0]);
    }

    #[test]
    fn avgpool_of_constant_is_constant() {
        let x = Tensor::full(&[2, 3, 4, 4, 4], 2.5f32);
        let y = avgpool3d_forward(&x, Exec::Sequential).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn global_avg_pool_backward_is_uniform() {
        let x = Tensor::from_vec(&[1, 2, 2, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data()[0], 3.5);
        assert_eq!(y.data()[1], 11.5);
        let g = Tensor::from_vec(&[1, 2], vec![8.0, 16.0]).unwrap();
        let gin = global_avg_pool_backward(&[1, 2, 2, 2, 2], &g).unwrap();
        assert!(gin.data()[..8].iter().all(|&v| v == 1.0));
        assert!(gin.data()[8..].iter().all(|&v| v == 2.0));
    }
}
