//! Parameter initialization.

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<F: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.uniform_range(-limit, limit)))
}

/// Kernel `[K, C, kh, kw]` with fan-in `C*kh*kw` and fan-out `K*kh*kw`.
pub fn conv_kernel<F: Scalar>(shape: [usize; 4], rng: &mut RngStream) -> Tensor<F> {
    let [k, c, kh, kw] = shape;
    glorot_uniform(&shape, c * kh * kw, k * kh * kw, rng)
}

/// Dense weights `[inputs, outputs]`.
pub fn dense_weights<F: Scalar>(inputs: usize, outputs: usize, rng: &mut RngStream) -> Tensor<F> {
    glorot_uniform(&[inputs, outputs], inputs, outputs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_reproducible() {
        let a: Tensor<f32> = conv_kernel([8, 3, 3, 3], &mut RngStream::new(5));
        let b: Tensor<f32> = conv_kernel([8, 3, 3, 3], &mut RngStream::new(5));
        assert_eq!(a, b);
        let limit = (6.0f32 / (27.0 + 72.0)).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= limit));
    }
}
