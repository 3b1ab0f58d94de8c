//! Separable linear resampling (2x2 box downsample, bilinear upsample) and
//! the adjoints needed to backpropagate through them.

use crate::error::{Error, Result};
use crate::image::ImageBuf;

/// A 1-D linear map from `in_len` to `out_len` samples where every output
/// reads at most two inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    pub in_len: usize,
    pub out_len: usize,
    /// `(i0, w0, i1, w1)` per output sample.
    pub taps: Vec<(usize, f64, usize, f64)>,
}

impl AxisMap {
    /// Pairwise mean; a trailing odd sample maps through with weight 1.
    pub fn halve(in_len: usize) -> Self {
        let out_len = in_len.div_ceil(2);
        let taps = (0..out_len)
            .map(|o| {
                let i = 2 * o;
                if i + 1 < in_len {
                    (i, 0.5, i + 1, 0.5)
                } else {
                    (i, 1.0, i, 0.0)
                }
            })
            .collect();
        Self {
            in_len,
            out_len,
            taps,
        }
    }

    /// Linear interpolation with pixel-center alignment and edge clamping.
    pub fn linear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let last = in_len - 1;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, last as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(last);
                let f = src - i0 as f64;
                (i0, 1.0 - f, i1, f)
            })
            .collect();
        Self {
            in_len,
            out_len,
            taps,
        }
    }
}

fn check_nonzero(img: &ImageBuf) -> Result<()> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::ZeroDimension);
    }
    Ok(())
}

/// Applies `mx` along rows and `my` along columns.
pub fn apply_separable(img: &ImageBuf, mx: &AxisMap, my: &AxisMap) -> ImageBuf {
    debug_assert_eq!(img.width(), mx.in_len);
    debug_assert_eq!(img.height(), my.in_len);
    let (w, ow, oh) = (img.width(), mx.out_len, my.out_len);
    let mut out = ImageBuf::new(ow, oh, img.channels(), img.color_space());
    let mut rows = vec![0.0; ow * img.height()];
    for c in 0..img.channels() {
        let src = img.plane(c);
        for (y, row) in rows.chunks_exact_mut(ow).enumerate() {
            let s = &src[y * w..(y + 1) * w];
            for (o, &(i0, w0, i1, w1)) in row.iter_mut().zip(&mx.taps) {
                *o = w0 * s[i0] + w1 * s[i1];
            }
        }
        let dst = out.plane_mut(c);
        for (oy, &(i0, w0, i1, w1)) in my.taps.iter().enumerate() {
            let (r0, r1) = (&rows[i0 * ow..(i0 + 1) * ow], &rows[i1 * ow..(i1 + 1) * ow]);
            for ((d, a), b) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(r0).zip(r1) {
                *d = w0 * a + w1 * b;
            }
        }
    }
    out
}

/// Transpose of [`apply_separable`].
pub fn adjoint_separable(grad: &ImageBuf, mx: &AxisMap, my: &AxisMap) -> ImageBuf {
    debug_assert_eq!(grad.width(), mx.out_len);
    debug_assert_eq!(grad.height(), my.out_len);
    let (ow, w, h) = (mx.out_len, mx.in_len, my.in_len);
    let mut out = ImageBuf::new(w, h, grad.channels(), grad.color_space());
    let mut rows = vec![0.0; ow * h];
    for c in 0..grad.channels() {
        rows.iter_mut().for_each(|v| *v = 0.0);
        let g = grad.plane(c);
        for (oy, &(i0, w0, i1, w1)) in my.taps.iter().enumerate() {
            let src = &g[oy * ow..(oy + 1) * ow];
            for (r, s) in rows[i0 * ow..(i0 + 1) * ow].iter_mut().zip(src) {
                *r += w0 * s;
            }
            for (r, s) in rows[i1 * ow..(i1 + 1) * ow].iter_mut().zip(src) {
                *r += w1 * s;
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            let row = &rows[y * ow..(y + 1) * ow];
            let d = &mut dst[y * w..(y + 1) * w];
            for (&gv, &(i0, w0, i1, w1)) in row.iter().zip(&mx.taps) {
                d[i0] += w0 * gv;
                d[i1] += w1 * gv;
            }
        }
    }
    out
}

/// 2x2 block mean. Odd trailing rows/columns average the samples available.
pub fn downsample_half(img: &ImageBuf) -> Result<ImageBuf> {
    check_nonzero(img)?;
    Ok(apply_separable(
        img,
        &AxisMap::halve(img.width()),
        &AxisMap::halve(img.height()),
    ))
}

/// Adjoint of [`downsample_half`] for an input of `width`x`height`.
pub fn downsample_half_adjoint(grad: &ImageBuf, width: usize, height: usize) -> ImageBuf {
    adjoint_separable(grad, &AxisMap::halve(width), &AxisMap::halve(height))
}

/// Bilinear resize to `width`x`height`.
pub fn upsample_to(img: &ImageBuf, width: usize, height: usize) -> Result<ImageBuf> {
    check_nonzero(img)?;
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension);
    }
    Ok(apply_separable(
        img,
        &AxisMap::linear(img.width(), width),
        &AxisMap::linear(img.height(), height),
    ))
}

/// Adjoint of [`upsample_to`] from a `width`x`height` source.
pub fn upsample_to_adjoint(grad: &ImageBuf, width: usize, height: usize) -> ImageBuf {
    adjoint_separable(
        grad,
        &AxisMap::linear(width, grad.width()),
        &AxisMap::linear(height, grad.height()),
    )
}
