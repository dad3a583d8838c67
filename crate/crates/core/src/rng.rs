//! Keyed deterministic randomness.
//!
//! Every consumer derives its own stream from a root seed plus a list of
//! tags, so the value drawn for (split, image 17) does not depend on whether
//! image 16 was generated first. This is what makes parallel generation and
//! evaluation bitwise reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a tag into a key.
pub fn key(seed: u64, parts: &[u64]) -> u64 {
    let mut k = mix(seed);
    for &p in parts {
        k = mix(k ^ p);
    }
    k
}

/// FNV-1a over the bytes; used to tag streams by name ("val", "epoch").
pub fn str_tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in s.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stream keyed by `(seed, parts...)`. Independent of call order elsewhere.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(key(seed, parts))
}

/// Standard normal draw (Box-Muller, cosine branch).
pub fn normal(r: &mut ChaCha8Rng) -> f32 {
    use rand::Rng;
    let u1: f32 = r.gen_range(f32::MIN_POSITIVE..1.0);
    let u2: f32 = r.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}
