//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so noise for
//! a given pixel of a given frame is the same no matter which thread or tile
//! computes it.

use std::f64::consts::TAU;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MUL: u64 = 0xD1B5_4A32_D192_ED03;
const COUNTER_XOR: u64 = 0x8CB9_2BA7_2F3D_8DD7;
const INV_2_24: f64 = 1.0 / (1u64 << 24) as f64;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 finalizer.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CounterRng {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            counter: 0,
        }
    }

    /// Same seed, different stream.
    pub fn with_stream(self, stream: u64) -> Self {
        Self {
            stream,
            counter: 0,
            ..self
        }
    }

    /// Derives a stream id from a list of tags (step, image index, layer...).
    pub fn substream(self, tags: &[u64]) -> Self {
        let mut s = mix64(self.stream ^ GOLDEN);
        for &t in tags {
            s = mix64(s.wrapping_add(t).wrapping_mul(STREAM_MUL) ^ GOLDEN);
        }
        self.with_stream(s)
    }

    pub fn offset(self, n: u64) -> Self {
        Self {
            counter: self.counter.wrapping_add(n),
            ..self
        }
    }

    #[inline(always)]
    fn key(&self) -> u64 {
        mix64(self.seed.wrapping_add(GOLDEN)) ^ mix64(self.stream.wrapping_mul(STREAM_MUL) ^ GOLDEN)
    }

    /// Raw 64 random bits at absolute position `self.counter + i`.
    #[inline]
    pub fn bits_at(&self, i: u64) -> u64 {
        hash_bits(self.key(), self.counter.wrapping_add(i))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn uniform_at(&self, i: u64) -> f64 {
        (self.bits_at(i) >> 11) as f64 * INV_2_53
    }

    /// Uniform integer in `[0, n)`.
    #[inline]
    pub fn below_at(&self, i: u64, n: u64) -> u64 {
        ((self.bits_at(i) as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal at position `self.counter + i`.
    ///
    /// Positions `2k` and `2k + 1` are the two outputs of one Box-Muller pair.
    #[inline]
    pub fn normal_at(&self, i: u64) -> f64 {
        let pos = self.counter.wrapping_add(i);
        let (a, b) = normal_pair_from_bits(hash_bits(self.key(), pos >> 1));
        if pos & 1 == 0 {
            a
        } else {
            b
        }
    }

    /// The pair of normals at positions `2k`, `2k + 1` (relative to `counter`,
    /// which must be even for the pairing to line up).
    #[inline]
    pub fn normal_pair(&self, k: u64) -> (f64, f64) {
        normal_pair_from_bits(hash_bits(self.key(), (self.counter >> 1).wrapping_add(k)))
    }

    /// Single-precision version of [`normal_pair`](Self::normal_pair), drawn
    /// from the same bits.
    #[inline]
    pub fn normal_pair_f32(&self, k: u64) -> (f32, f32) {
        normal_pair_f32_from_bits(hash_bits(self.key(), (self.counter >> 1).wrapping_add(k)))
    }

    /// Precomputed per-stream key for tight loops; see [`StreamKey`].
    pub fn stream_key(&self) -> StreamKey {
        StreamKey {
            key: self.key(),
            base: self.counter >> 1,
        }
    }
}

/// Hoisted key of a [`CounterRng`] for per-pixel draws in hot loops.
#[derive(Clone, Copy, Debug)]
pub struct StreamKey {
    key: u64,
    base: u64,
}

impl StreamKey {
    #[inline(always)]
    pub fn normal_pair(&self, k: u64) -> (f64, f64) {
        normal_pair_from_bits(hash_bits(self.key, self.base.wrapping_add(k)))
    }

    #[inline(always)]
    pub fn normal_pair_f32(&self, k: u64) -> (f32, f32) {
        normal_pair_f32_from_bits(hash_bits(self.key, self.base.wrapping_add(k)))
    }
}

#[inline(always)]
fn hash_bits(key: u64, pos: u64) -> u64 {
    mix64(key.wrapping_add(mix64(pos ^ COUNTER_XOR)))
}

// Both uniforms carry 24 bits so the f32 and f64 paths see identical inputs.
#[inline(always)]
fn uniforms24(bits: u64) -> (u32, u32) {
    ((bits >> 40) as u32, ((bits >> 16) & 0xFF_FFFF) as u32)
}

#[inline(always)]
fn normal_pair_from_bits(bits: u64) -> (f64, f64) {
    let (a, b) = uniforms24(bits);
    let u1 = (a as f64 + 0.5) * INV_2_24;
    let u2 = b as f64 * INV_2_24;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

#[inline(always)]
fn normal_pair_f32_from_bits(bits: u64) -> (f32, f32) {
    let (a, b) = uniforms24(bits);
    let u1 = (a as f32 + 0.5) * INV_2_24 as f32;
    let u2 = b as f32 * INV_2_24 as f32;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f32::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// `n` consecutive standard normals starting at the generator's counter.
pub fn rng_normal(rng: &CounterRng, n: usize) -> Vec<f64> {
    (0..n as u64).map(|i| rng.normal_at(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = rng_normal(&CounterRng::new(42, 7), 1000);
        let b = rng_normal(&CounterRng::new(42, 7), 1000);
        assert_eq!(a, b);
        let c = rng_normal(&CounterRng::new(43, 7), 1000);
        assert_ne!(a, c);
    }

    #[test]
    fn offset_is_counter_shift() {
        let rng = CounterRng::new(1, 2);
        let all = rng_normal(&rng, 20);
        let tail = rng_normal(&rng.offset(5), 15);
        assert_eq!(&all[5..], &tail[..]);
    }

    #[test]
    fn pair_matches_positions() {
        let rng = CounterRng::new(9, 3);
        for k in 0..50 {
            let (a, b) = rng.normal_pair(k);
            assert_eq!(a, rng.normal_at(2 * k));
            assert_eq!(b, rng.normal_at(2 * k + 1));
            let key = rng.stream_key();
            assert_eq!(key.normal_pair(k), (a, b));
        }
    }

    #[test]
    fn f32_pair_tracks_f64_pair() {
        let key = CounterRng::new(5, 5).stream_key();
        for k in 0..10_000 {
            let (a, b) = key.normal_pair(k);
            let (af, bf) = key.normal_pair_f32(k);
            assert!((a - af as f64).abs() < 1e-5, "{a} {af}");
            assert!((b - bf as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn moments() {
        let n = 1_000_000;
        let xs = rng_normal(&CounterRng::new(2024, 0), n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn streams_uncorrelated() {
        let n = 100_000;
        let a = rng_normal(&CounterRng::new(77, 1), n);
        let b = rng_normal(&CounterRng::new(77, 2), n);
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.01, "corr {corr}");
    }

    #[test]
    fn below_in_range() {
        let rng = CounterRng::new(0, 0);
        for i in 0..1000 {
            assert!(rng.below_at(i, 7) < 7);
        }
    }
}
