//! Seedable, splittable noise source.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::TensorImage;

/// The generator used for every stochastic step.
pub type NoiseRng = ChaCha8Rng;

/// Generator for `seed` on an independent stream (e.g. a slice index).
pub fn stream_rng(seed: u64, stream: u64) -> NoiseRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal image of the given shape.
pub fn gaussian_image<S: Scalar>(
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut NoiseRng,
) -> TensorImage<S> {
    let data = (0..height * width * channels)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            S::lit(v)
        })
        .collect();
    TensorImage::from_raw(height, width, channels, data)
}

pub fn gaussian_like<S: Scalar>(img: &TensorImage<S>, rng: &mut NoiseRng) -> TensorImage<S> {
    let (c, h, w) = img.dims();
    gaussian_image(h, w, c, rng)
}
