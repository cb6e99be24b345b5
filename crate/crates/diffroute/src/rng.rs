//! Deterministic random number streams.
//!
//! Every stochastic component draws from its own named substream derived from
//! a single user-facing seed.  A substream is a ChaCha8 generator keyed by
//! SHA-256 over the seed and a label, so adding or reordering consumers never
//! perturbs the draws of unrelated components and identical (seed, label)
//! pairs reproduce bit-identical sequences on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent generator for `label` under the master `seed`.
pub fn substream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0x1f]); // separator so (seed, label) parsing is unambiguous
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Substream label for a numbered item within a component, e.g. one instance
/// of a generated dataset or one augmentation variant.
pub fn indexed_label(component: &str, index: usize) -> String {
    format!("{component}/{index}")
}
