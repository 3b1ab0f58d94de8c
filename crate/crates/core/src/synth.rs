//! Procedural stand-ins for rendered frames, used by tests, benchmarks and
//! the parameter-recovery experiment.

use crate::error::Result;
use crate::image::{ColorSpace, ImageBuf};
use crate::rng::CounterRng;
use crate::stages::{color_map_apply, ColorMapParams};

/// Palette colour from three uniforms. The channels are independent with
/// differently shaped marginals (uniform, skewed dark, skewed bright), which
/// makes an affine colour map identifiable from the colour distribution.
fn palette(u: [f64; 3]) -> [f64; 3] {
    [0.05 + 0.9 * u[0], 0.05 + 0.9 * u[1] * u[1], 0.05 + 0.9 * u[2].sqrt()]
}

/// A `w`x`h` gamma-encoded image: a two-colour gradient background under
/// 40 to 80 small random discs and rectangles, plus independent per-channel
/// grain. All values stay inside [0.05, 0.95].
pub fn synthetic_render(w: usize, h: usize, seed: u64) -> ImageBuf {
    let rng = CounterRng::new(seed, 0x5EED);
    let mut draw = 0u64;
    let mut u = || {
        draw += 1;
        rng.uniform_at(draw)
    };
    let c0 = palette([u(), u(), u()]);
    let c1 = palette([u(), u(), u()]);
    let angle = u() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = ImageBuf::from_fn(w, h, 3, ColorSpace::GammaEncoded, |c, x, y| {
        let t = ((x as f64 / w as f64 - 0.5) * dx + (y as f64 / h as f64 - 0.5) * dy + 0.71) / 1.42;
        c0[c] + (c1[c] - c0[c]) * t.clamp(0.0, 1.0)
    });
    let shapes = 40 + (u() * 40.0) as usize;
    for _ in 0..shapes {
        let col = palette([u(), u(), u()]);
        let (cx, cy) = (u() * w as f64, u() * h as f64);
        let size = (0.02 + 0.1 * u()) * w.min(h) as f64;
        let disc = u() < 0.5;
        let aspect = 0.5 + u();
        let reach = size * aspect.max(1.0 / aspect) + 1.0;
        let (x0, x1) = ((cx - reach).max(0.0) as usize, ((cx + reach) as usize).min(w));
        let (y0, y1) = ((cy - reach).max(0.0) as usize, ((cy + reach) as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (ox, oy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    ox * ox + oy * oy <= size * size
                } else {
                    ox.abs() <= size * aspect && oy.abs() <= size / aspect
                };
                if inside {
                    for (c, &v) in col.iter().enumerate() {
                        img.set(c, x, y, v);
                    }
                }
            }
        }
    }
    let grain = rng.substream(&[1]);
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        *v = (*v + 0.08 * (grain.uniform_at(i as u64) - 0.5)).clamp(0.05, 0.95);
    }
    img
}

pub fn synthetic_set(n: usize, w: usize, h: usize, seed: u64) -> Vec<ImageBuf> {
    (0..n).map(|i| synthetic_render(w, h, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))).collect()
}

/// Ground-truth colour map of the recovery experiment:
/// `M = diag(0.9, 0.8, 0.7)`, `t = (0.05, 0.05, 0.05)`.
pub fn recovery_color_map() -> ColorMapParams {
    ColorMapParams {
        m: [[0.9, 0.0, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 0.7]],
        t: [0.05; 3],
    }
}

/// Applies a colour map to every image of a set.
pub fn map_set(images: &[ImageBuf], p: &ColorMapParams) -> Result<Vec<ImageBuf>> {
    images.iter().map(|i| color_map_apply(i, p)).collect()
}
