//! Minimal double-precision neural network building blocks with explicit
//! forward caches and hand-written backward passes.
//!
//! A gradient is stored in a value of the same type as the module it belongs
//! to (see [`Module::zeros_like`]), so optimizers can walk parameters and
//! gradients in lockstep.

mod conv;
mod layers;
mod optim;

pub use conv::{Conv2d, ConvCache};
pub use layers::{gelu, gelu_grad, relu_inplace, weighted_cross_entropy, LayerNorm, LayerNormCache, Linear};
pub use optim::{Optimizer, OptimizerKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a parent seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined state
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Anything with trainable parameter tensors.
///
/// `params` and `params_mut` must list tensors in the same order.
pub trait Module: Clone {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for p in g.params_mut() {
            p.fill(0.0);
        }
        g
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Multiplies every tensor by `factor` (used to average accumulated gradients).
    fn scale(&mut self, factor: f64) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of every parameter, in `params` order.
    fn flat(&self) -> Vec<f64> {
        self.params().into_iter().flat_map(|p| p.iter().copied()).collect()
    }
}
