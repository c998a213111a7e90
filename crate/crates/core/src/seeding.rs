//! Deterministic seed derivation.
//!
//! Every random component owns a `ChaCha8Rng` seeded from the experiment's
//! global seed plus a stable tag, so subcommands that run in separate
//! processes (generate, group, train) still reproduce each other's streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent child seed from `(base, tag, index)`.
///
/// FNV-1a over the tag bytes followed by two splitmix64 finalization rounds.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= index;
    splitmix64(splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded stream cipher RNG; identical across platforms.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, "texture", 0);
        let b = derive_seed(7, "texture", 1);
        let c = derive_seed(7, "noise", 0);
        let d = derive_seed(8, "texture", 0);
        assert_eq!(a, derive_seed(7, "texture", 0));
        assert!(a != b && a != c && a != d && b != c);
    }
}
