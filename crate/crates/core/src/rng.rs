//! Seed derivation. Every randomized routine in the crate takes an explicit
//! seed and derives independent child streams from it, so runs are
//! reproducible from a single top-level seed and parallel consumers never
//! share an RNG.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix (splitmix64 finalizer). Not a cryptographic hash; it
/// only has to be deterministic across platforms and releases.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a, then mixed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

/// Derives a child seed from a base seed, a stream tag and an index.
pub fn child_seed(base: u64, tag: &str, index: u64) -> u64 {
    mix(base ^ hash_tag(tag) ^ mix(index))
}

/// Creates a ChaCha8 generator from a seed. ChaCha8 is used everywhere so
/// that streams are stable across rand upgrades and platforms.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
