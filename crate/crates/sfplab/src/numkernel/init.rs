//! Seeded, reproducible parameter initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
    XavierUniform,
    Zeros,
}

/// Deterministic initialization: the same (shape, seed, scheme) always
/// produces bit-identical values.
pub fn seeded_init(rows: usize, cols: usize, seed: u64, scheme: InitScheme) -> Matrix {
    match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::XavierUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("constructed length matches")
        }
    }
}

/// Stable per-tensor seed derived from a base seed and a tensor ordinal,
/// so every parameter draws from an independent stream.
pub fn derive_seed(base: u64, ordinal: u64) -> u64 {
    // SplitMix64 finalizer over the combined value.
    let mut z = base ^ ordinal.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_scheme_is_all_zero() {
        let m = seeded_init(3, 5, 7, InitScheme::Zeros);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = seeded_init(4, 6, 123, InitScheme::XavierUniform);
        let b = seeded_init(4, 6, 123, InitScheme::XavierUniform);
        assert!(a.bit_eq(&b));
        let c = seeded_init(4, 6, 124, InitScheme::XavierUniform);
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn xavier_entries_respect_bound() {
        let bound = (6.0f64 / 8.0).sqrt();
        let m = seeded_init(4, 4, 99, InitScheme::XavierUniform);
        assert!((bound - 0.866).abs() < 1e-3);
        assert!(m.data().iter().all(|&v| v.abs() <= bound));
        // Not degenerate: draws should spread over the interval.
        assert!(m.data().iter().any(|&v| v.abs() > bound / 2.0));
    }

    #[test]
    fn derived_seeds_differ_per_ordinal() {
        let s0 = derive_seed(42, 0);
        let s1 = derive_seed(42, 1);
        assert_ne!(s0, s1);
        assert_eq!(s0, derive_seed(42, 0));
    }
}
