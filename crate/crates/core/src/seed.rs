//! Seed derivation. Every randomized routine takes a base seed and a path of
//! integers (stage, epoch, batch, class, ...) so streams never alias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

// Stream tags.
pub const TAG_INIT: u64 = 1;
pub const TAG_STAGE1: u64 = 2;
pub const TAG_STAGE2: u64 = 3;
pub const TAG_SPLIT: u64 = 4;
pub const TAG_DATA: u64 = 5;
pub const TAG_CLASSIFIER_REINIT: u64 = 6;
pub const TAG_MOMENTS: u64 = 7;
pub const TAG_VFC: u64 = 8;
pub const TAG_MSTEP: u64 = 9;
pub const TAG_ESTEP: u64 = 10;
pub const TAG_PERTURB_STRONG: u64 = 11;
pub const TAG_PERTURB_WEAK: u64 = 12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_do_not_collide() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[]), derive(2, &[]));
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
    }
}
