//! Parameter initialization from a seeded generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::Tensor;

/// He-uniform initialization for a conv weight of shape
/// `(out_ch, in_ch, kh, kw)`: uniform in `±sqrt(6 / fan_in)` where
/// `fan_in = in_ch·kh·kw`. Suits ReLU networks; keeps layer output variance
/// near its input variance at depth.
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape product matches generated length")
}

/// Zero bias of shape `(1, out_ch, 1, 1)`.
pub fn zero_bias(out_ch: usize) -> Tensor {
    Tensor::zeros([1, out_ch, 1, 1])
}
