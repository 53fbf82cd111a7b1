//! Fixture builders shared by the benchmark suite. Everything here is
//! seed-deterministic so successive `cargo bench` runs time the same circuit
//! on the same bits.

use garnet_core::model::{ModelError, ModelParams};
use garnet_core::{Architecture, Scale};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Random ternary weights at a given zero fraction. The sign pattern is what
/// the compiler and garbler see, so this stands in for a trained model
/// without needing a dataset at bench time.
pub fn synthetic_params(
    base: &Architecture,
    scale: Scale,
    sparsity: f64,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    let concrete = base.scaled(scale);
    let mut params = ModelParams::zeros(&concrete, scale)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for tensor in &mut params.weights {
        for i in 0..tensor.len() {
            let v = if rng.random::<f64>() < sparsity {
                0
            } else if rng.random::<bool>() {
                1
            } else {
                -1
            };
            tensor.set(i, v);
        }
    }
    Ok(params)
}

/// Deterministic input bit vector.
pub fn random_bits(count: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random::<bool>()).collect()
}
