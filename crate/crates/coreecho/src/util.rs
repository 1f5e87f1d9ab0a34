//! Seed derivation and byte hashing helpers.

/// SplitMix64 step.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically mix several components into one stream seed.
///
/// Every consumer of randomness derives its own stream from
/// (global seed, purpose tag, epoch, index, ...) so results are independent
/// of evaluation order and worker count.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x6A09_E667_F3BC_C909;
    let mut acc = 0u64;
    for &p in parts {
        state ^= p.wrapping_mul(0x100_0000_01B3);
        acc ^= splitmix64(&mut state);
    }
    // One extra scramble so short part lists still diffuse.
    acc ^ splitmix64(&mut state)
}

/// FNV-1a over bytes; used for parameter checksums in logs and freeze
/// assertions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01B3);
    }
    h
}
