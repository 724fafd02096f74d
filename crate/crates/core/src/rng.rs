//! Seed derivation and sampling helpers.
//!
//! Every random stream in a run is derived from the single top-level seed by
//! mixing in a stream label, the round index and the client id. Streams are
//! therefore independent of scheduling and thread count.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named stream labels.
pub mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const PLUGIN_INIT: u64 = 2;
    pub const DATA: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SAMPLING: u64 = 6;
    pub const CLIENT: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable hash of `(seed, stream, round, client)`.
pub fn derive_seed(seed: u64, stream: u64, round: u64, client: u64) -> u64 {
    let mut h = splitmix64(seed);
    for part in [stream, round, client] {
        h = splitmix64(h ^ part.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn stream_rng(seed: u64, stream: u64, round: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, round, client))
}

/// Normal samples with standard deviation `std`, resampled outside ±2σ.
pub fn truncated_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_component() {
        let base = derive_seed(1, 2, 3, 4);
        assert_eq!(base, derive_seed(1, 2, 3, 4));
        assert_ne!(base, derive_seed(0, 2, 3, 4));
        assert_ne!(base, derive_seed(1, 0, 3, 4));
        assert_ne!(base, derive_seed(1, 2, 0, 4));
        assert_ne!(base, derive_seed(1, 2, 3, 0));
        assert_ne!(derive_seed(1, 2, 3, 4), derive_seed(1, 2, 4, 3));
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = truncated_normal_vec(&mut rng, 10_000, 0.02);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        // truncation at 2σ shrinks σ by ~12%
        assert!((var.sqrt() - 0.0176).abs() < 0.001, "{}", var.sqrt());
    }
}
