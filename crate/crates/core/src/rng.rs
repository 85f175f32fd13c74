//! Seed fan-out.
//!
//! A single master seed feeds every randomness consumer through a named
//! stream. Each stream is a ChaCha8 generator keyed by
//! `splitmix64(master ^ splitmix64(stream_id))` and positioned on ChaCha
//! stream `counter`, so consumer `(stream, counter)` pairs never overlap and
//! adding a new stream id leaves existing draws untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// Named randomness consumers. Ids are frozen; append new ones only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Corruption = 3,
    MonteCarlo = 4,
    Batch = 5,
    Split = 6,
    Probe = 7,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(master, stream, counter)`.
pub fn stream_rng(master: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let key = splitmix64(master ^ splitmix64(stream as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(counter);
    rng
}

/// Derived integer seed, for objects (like scenes) that carry their own seed.
pub fn derive_seed(master: u64, stream: Stream, counter: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream as u64)) ^ counter)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw (Box-Muller, one value per call).
pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        let r = libm_sqrt(-2.0 * num_traits::Float::ln(u1));
        return r * num_traits::Float::cos(core::f64::consts::TAU * u2);
    }
}

/// Normal draw truncated to `[-2 std, 2 std]` by rejection.
pub fn truncated_normal<R: rand::Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_independent_of_each_other() {
        let a: u64 = stream_rng(7, Stream::Data, 0).gen();
        let b: u64 = stream_rng(7, Stream::Init, 0).gen();
        let c: u64 = stream_rng(7, Stream::Data, 1).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, stream_rng(7, Stream::Data, 0).gen::<u64>());
    }

    #[test]
    fn normal_moments() {
        let mut rng = seeded(3);
        let n = 20_000;
        let xs: alloc::vec::Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert!((0..1000).all(|_| truncated_normal(&mut rng, 0.02).abs() <= 0.04));
    }
}
