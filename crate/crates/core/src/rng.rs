//! Deterministic, platform-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a batch; used so parallel
/// episodes reproduce the sequential ones exactly.
pub fn derive(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_mix(seed, index))
}

fn split_mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a: f64 = derive(7, 0).gen();
        let b: f64 = derive(7, 0).gen();
        let c: f64 = derive(7, 1).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
