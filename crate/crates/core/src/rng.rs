//! Deterministic stream derivation.
//!
//! Every random decision in the simulator draws from a `ChaCha8Rng` whose seed
//! is derived from the master seed, a short domain tag, and integer indices
//! (round, user, batch, ...). Streams are therefore independent of each other
//! and of iteration order elsewhere in the program.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; bijective on u64.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, domain, indices)`.
///
/// The domain is absorbed byte-wise and terminated before the indices so that
/// `("ab", [])` and `("a", [b])` cannot collide structurally.
pub fn derive_seed(master: u64, domain: &str, indices: &[u64]) -> u64 {
    let mut h = mix(master ^ 0x5EED_5EED_5EED_5EED);
    for &b in domain.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    h = mix(h ^ 0xFF);
    for &ix in indices {
        h = mix(h ^ ix);
    }
    h
}

/// A fresh generator for the given stream coordinates.
pub fn stream(master: u64, domain: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, indices))
}

/// Fold arbitrary bytes (e.g. a config digest) into a seed.
pub fn fold_bytes(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = mix(seed ^ 0xB17E_5EED_0000_0001);
    for chunk in bytes.chunks(8) {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        h = mix(h ^ u64::from_le_bytes(w));
    }
    h
}
