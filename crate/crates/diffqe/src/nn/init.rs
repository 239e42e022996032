//! Seeded parameter initialization.

use crate::nn::ops::LEAKY_SLOPE;
use crate::num::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Kaiming-uniform fill scaled for the leaky rectifier used by the models.
pub fn kaiming<F: Scalar>(w: &mut [F], fan_in: usize, rng: &mut ChaCha8Rng) {
    let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    for v in w.iter_mut() {
        *v = F::from_f64(rng.gen_range(-bound..bound));
    }
}
