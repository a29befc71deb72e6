//! Replayable Gaussian noise.
//!
//! Every draw is addressed by `(seed, domain, index)`: the seed and domain
//! key a ChaCha8 generator and the index selects its stream, so any single
//! noise array can be regenerated without replaying the ones before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensorops::Tensor;

/// Independent noise families drawn from one user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Prior draw `x_T` and per-step `z_t` of ancestral sampling.
    Sampling = 1,
    /// Per-step noise and timestep choices during training.
    Training = 2,
    /// Surface point sampling.
    Surface = 3,
    /// Parameter initialisation.
    Init = 4,
    /// Anything else (tests, metric sampling).
    Misc = 5,
}

pub fn generator(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Standard-normal `rows x cols` array for `(seed, domain, index)`.
pub fn normal_tensor(seed: u64, domain: Domain, index: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = generator(seed, domain, index);
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}
