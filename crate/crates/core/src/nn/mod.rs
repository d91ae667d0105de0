//! Minimal CPU neural-network toolkit with hand-written backward passes.
//!
//! Everything runs single-threaded in `f64`, so training is bit-reproducible
//! for a fixed seed and gradients can be checked against finite differences.
//! Tensors are single samples in channel-major (C, H, W) layout; minibatches
//! are handled by accumulating gradients over samples before an optimiser step.

mod conv;
mod layers;
mod loss;
mod optim;
mod tensor;

pub use self::conv::Conv2d;
pub use self::layers::{
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward, Cache, Layer, Linear,
    Residual, Sequential,
};
pub use self::loss::{log_softmax, smooth_l1, softmax, softmax_cross_entropy};
pub use self::optim::{clip_grad_norm, LrSchedule, Param, Sgd};
pub use self::tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used for every initialisation and sampling decision.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Anything owning trainable parameters.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated, in visiting order.
    fn flat_values(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    fn set_flat_value(&mut self, mut index: usize, value: f64) {
        for p in self.params_mut() {
            if index < p.value.len() {
                p.value[index] = value;
                return;
            }
            index -= p.value.len();
        }
        panic!("parameter index out of range");
    }
}
