//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based stream
//! cipher generator. A 64-bit user seed selects the key and a 64-bit stream id
//! selects an independent stream, so results do not depend on the order in
//! which tensors or scenes are generated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// FNV-1a, used to turn a tensor name into a stream id.
pub fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform(-bound, bound) tensor drawn from the stream named `name`.
pub fn uniform(seed: u64, name: &str, shape: &[usize], bound: f32) -> Tensor {
    let mut rng = rng_for(seed, stream_id(name));
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Fan-in scaled uniform initialisation, `bound = 1/sqrt(fan_in)`.
pub fn fan_in_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(seed, name, shape, 1.0 / (fan_in.max(1) as f32).sqrt())
}
