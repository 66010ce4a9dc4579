//! Seeded, platform-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator; identical seeds give identical streams on every
/// platform.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream keyed by a base seed and a path of labels, e.g.
/// `(seed, [EPOCH, epoch])`. Used so that every epoch, batch and augmentation
/// draws from its own stream and training can resume mid-run.
pub fn derived(seed: u64, path: &[u64]) -> SeededRng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = seeded(7).random_iter().take(8).collect();
        let b: Vec<u64> = seeded(7).random_iter().take(8).collect();
        assert_eq!(a, b);
        let c: Vec<u64> = derived(7, &[1, 2]).random_iter().take(8).collect();
        let d: Vec<u64> = derived(7, &[2, 1]).random_iter().take(8).collect();
        assert_ne!(c, d);
    }
}
