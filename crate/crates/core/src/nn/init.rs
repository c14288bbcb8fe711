//! Weight initialization.

use crate::tensor::{Scalar, Tensor};
use rand::Rng;

/// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in) (ReLU gain).
/// Samples are drawn in f64 so every element type sees the same stream.
pub fn kaiming_uniform<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn bound_and_determinism() {
        let mut a = ChaCha12Rng::seed_from_u64(7);
        let mut b = ChaCha12Rng::seed_from_u64(7);
        let ta: Tensor<f32> = kaiming_uniform(&[8, 4, 3, 3, 3], 4 * 27, &mut a);
        let tb: Tensor<f32> = kaiming_uniform(&[8, 4, 3, 3, 3], 4 * 27, &mut b);
        assert_eq!(ta.data(), tb.data());
        let bound = (6.0f64 / (4.0 * 27.0)).sqrt() as f32;
        assert!(ta.data().iter().all(|v| v.abs() <= bound));
    }
}
