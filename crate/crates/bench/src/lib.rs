//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unip_core::nn::{Arch, Model};
use unip_core::Tensor;

pub fn lenet(seed: u64) -> Model {
    Arch::Lenet.build(&mut ChaCha8Rng::seed_from_u64(seed)).expect("preset builds")
}

/// Uniform `[0, 1)` MNIST-shaped batch and labels.
pub fn mnist_batch(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 784).map(|_| rng.random::<f32>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    (Tensor::from_vec(vec![n, 1, 28, 28], data).expect("shape matches"), labels)
}
