//! Deterministic seed derivation. Every random quantity in the crate flows
//! from a root seed through [`derive_seed`], so nested loops (simulation,
//! then bootstrap replicate) never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for position `index` under `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn stream(parent: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn derived_seeds_are_distinct_across_levels() {
        let mut seen = HashSet::new();
        for a in 0..50u64 {
            let child = derive_seed(7, a);
            assert!(seen.insert(child));
            for b in 0..50u64 {
                assert!(seen.insert(derive_seed(child, b)));
            }
        }
    }

    #[test]
    fn streams_are_reproducible() {
        let x: Vec<u64> = (0..5).map(|_| stream(1, 2).random()).collect();
        let mut r = stream(1, 2);
        let first: u64 = r.random();
        assert_eq!(x[0], first);
        assert_ne!(stream(1, 2).random::<u64>(), stream(1, 3).random::<u64>());
    }
}
