//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eaa_core::analysis::{Grid2D, Profile1D};
use eaa_core::memory::{HashingEmbedder, MemoryStore};

/// A Gaussian line profile with uniform noise of 1% of the peak.
pub fn noisy_profile(seed: u64, n: usize) -> Profile1D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|i| -9.0 + 18.0 * i as f64 / (n - 1) as f64).collect();
    let ys = xs
        .iter()
        .map(|x| (-(x - 0.7) * (x - 0.7) / 4.5).exp() + 0.1 + 0.01 * (rng.random::<f64>() - 0.5))
        .collect();
    Profile1D::new(xs, ys)
}

pub fn random_grid(seed: u64, size: usize) -> Grid2D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid2D::from_fn(size, size, |_, _| rng.random::<f64>())
}

/// An in-memory store with `n` short synthetic notes.
pub fn filled_store(seed: u64, n: usize) -> MemoryStore {
    const WORDS: [&str; 12] = [
        "zone", "plate", "focus", "beam", "energy", "detector", "stage", "drift", "star", "scan", "sample", "grid",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = MemoryStore::in_memory(Box::new(HashingEmbedder::new(256)));
    let at = chrono::DateTime::UNIX_EPOCH;
    for _ in 0..n {
        let text: Vec<&str> = (0..6).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        store.remember(&text.join(" "), vec![], "bench", at).expect("in-memory store");
    }
    store
}
