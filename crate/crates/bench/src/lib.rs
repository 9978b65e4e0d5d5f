//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use webly_core::dataset::SynthConfig;
use webly_core::eval::{prepare_synth_experiment, TestSplit};
use webly_core::{Matrix, MultimodalDataset};

pub fn uniform_matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

pub fn binary_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
    )
}

/// Five classes, 5000 training samples, two test-time modalities plus one
/// train-only modality and their concat.
pub fn training_set(seed: u64) -> MultimodalDataset {
    let cfg = SynthConfig {
        n_classes: 5,
        n_per_class: 500,
        n_background: 2500,
        modality_dims: vec![16, 16, 16],
        noise_level: 0.5,
        hard_fraction: 0.3,
        class_separation: 2.0,
        train_only_modalities: 1,
        seed,
    };
    prepare_synth_experiment(&cfg, &TestSplit::default())
        .expect("valid config")
        .train
}
