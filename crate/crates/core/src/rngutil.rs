//! Seeded, domain-separated randomness.
//!
//! Every sampling site derives its own ChaCha20 stream from the run's
//! rng seed plus a domain tag and key, so samples for one seed never
//! depend on how many other seeds exist or in what order stages run.

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG stream for (seed, domain, key).
pub fn derive_rng(rng_seed: u64, domain: &str, key: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(rng_seed.to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(domain.as_bytes());
    hasher.update([0x1f]);
    hasher.update(key.as_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// Uniform integer in `[0, bound)` by rejection sampling, so the
/// distribution is exact and stable across platforms.
pub fn bounded(rng: &mut ChaCha20Rng, bound: u64) -> u64 {
    assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let raw = rng.next_u64();
        if raw < zone {
            return raw % bound;
        }
    }
}

/// Samples `k` distinct indices from `0..n` uniformly without
/// replacement (partial Fisher-Yates). The result is sorted.
pub fn sample_indices(rng: &mut ChaCha20Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + bounded(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    chosen
}
