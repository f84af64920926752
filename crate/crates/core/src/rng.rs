//! Seed derivation and named RNG streams.
//!
//! Every random decision in a run is drawn from a ChaCha8 stream whose seed
//! is derived from the run seed plus a list of tags (round, client id,
//! purpose). Derivation is stateless, so any round or client stream can be
//! reconstructed in isolation — this is what makes `--resume` and replay
//! possible without storing RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a base seed with an ordered list of tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut acc = splitmix64(base ^ 0x6c62_272e_07bb_0142);
    for (i, &t) in tags.iter().enumerate() {
        acc = splitmix64(acc ^ splitmix64(t.wrapping_add(i as u64 + 1)));
    }
    acc
}

/// Stable tag for a named stream ("data", "noise", "gen", ...).
pub fn stream_tag(name: &str) -> u64 {
    // FNV-1a over the name bytes; only used as a tag, not for quality.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha8 stream seeded from (base, tags...).
pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Named stream: `stream(seed, "noise", &[t, k])`.
pub fn stream(base: u64, name: &str, tags: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(tags.len() + 1);
    all.push(stream_tag(name));
    all.extend_from_slice(tags);
    rng_from(base, &all)
}
