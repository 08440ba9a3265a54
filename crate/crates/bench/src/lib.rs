//! Benchmark fixtures shared by the criterion benches.

use classaware::phantom::{generate_phantoms, PhantomConfig, PhantomDataset};

/// Default 32x32 phantoms, a handful of each split.
pub fn phantoms() -> PhantomDataset {
    let cfg = PhantomConfig { n_labelled: 8, n_unlabelled: 16, n_test: 8, ..PhantomConfig::default() };
    generate_phantoms(&cfg).expect("default phantom config is feasible")
}
