//! Seeded randomness. Everything that draws randomness takes an explicit
//! u64 seed and builds a ChaCha12 stream from it, so identical seeds give
//! bit-identical runs regardless of call-site interleaving elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha12Rng;

pub fn rng_from(seed: u64) -> SeededRng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream tag.
/// SplitMix64 finalizer; cheap and well-mixed, so consumers can carve any
/// number of decorrelated sub-streams out of one run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One standard normal draw. Sampled in f64 and narrowed, so an f32 run
/// sees the same underlying draw sequence as an f64 run with that seed.
pub fn normal<E: Scalar>(rng: &mut SeededRng) -> E {
    let v: f64 = rng.sample(StandardNormal);
    E::from_f64(v)
}

pub fn normal_tensor<E: Scalar>(shape: &[usize], rng: &mut SeededRng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| normal::<E>(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data length agree by construction")
}

pub fn uniform_f64(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Uniform integer in `[lo, hi]` inclusive.
pub fn uniform_usize(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<f64> = {
            let mut r = rng_from(7);
            (0..32).map(|_| normal::<f64>(&mut r)).collect()
        };
        let b: Vec<f64> = {
            let mut r = rng_from(7);
            (0..32).map(|_| normal::<f64>(&mut r)).collect()
        };
        assert_eq!(a, b);
        let c: Vec<f64> = {
            let mut r = rng_from(8);
            (0..32).map(|_| normal::<f64>(&mut r)).collect()
        };
        assert_ne!(a, c);
    }

    #[test]
    fn sub_seeds_decorrelate() {
        let s1 = sub_seed(42, 1);
        let s2 = sub_seed(42, 2);
        assert_ne!(s1, s2);
        assert_ne!(s1, 42);
        // stable across calls
        assert_eq!(sub_seed(42, 1), s1);
    }

    #[test]
    fn f32_draws_track_f64_stream() {
        let mut r1 = rng_from(5);
        let mut r2 = rng_from(5);
        for _ in 0..16 {
            let wide: f64 = normal(&mut r1);
            let narrow: f32 = normal(&mut r2);
            assert_eq!(narrow, wide as f32);
        }
    }
}
