//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sacd_core::contrastbank::MemoryBank;
use sacd_core::encoders::Modality;
use sacd_core::Tensor;

pub fn random_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Rows scaled to unit length.
pub fn unit_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut t = random_rows(seed, rows, cols);
    for row in t.values_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

pub fn labels(seed: u64, n: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..5)).collect()
}

/// A full bank of random unit features.
pub fn full_bank(modality: Modality, seed: u64, capacity: usize, dim: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(modality, capacity);
    bank.enqueue(&unit_rows(seed, capacity, dim), &labels(seed, capacity))
        .unwrap();
    bank
}
