//! Splittable seeding.
//!
//! A child seed is `mix(parent ^ mix(fnv1a(tag)))`, where `mix` is the
//! SplitMix64 finalizer. Children depend only on the parent and the tag, so
//! sub-experiments can run in any order or in parallel.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the component named `tag` under `parent`.
pub fn derive(parent: u64, tag: &str) -> u64 {
    mix(parent ^ mix(fnv1a(tag.as_bytes())))
}
