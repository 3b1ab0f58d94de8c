//! Shared helpers for unit tests.

use crate::image::{ColorSpace, ImageBuf};
use crate::rng::CounterRng;

pub fn random_image(w: usize, h: usize, lo: f64, hi: f64, seed: u64) -> ImageBuf {
    let rng = CounterRng::new(seed, 0xAB);
    ImageBuf::from_fn(w, h, 3, ColorSpace::GammaEncoded, |c, x, y| {
        lo + (hi - lo) * rng.uniform_at(((c * h + y) * w + x) as u64)
    })
}

pub fn random_weights(like: &ImageBuf, seed: u64) -> ImageBuf {
    let rng = CounterRng::new(seed, 0xCD);
    let mut g = like.zeros_like();
    for (i, v) in g.data_mut().iter_mut().enumerate() {
        *v = rng.uniform_at(i as u64) * 2.0 - 1.0;
    }
    g
}

/// Central difference of `f` at `x` along one coordinate.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
