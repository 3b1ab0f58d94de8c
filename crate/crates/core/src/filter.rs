//! Odd-length 1-D convolutions along rows and columns with replicate-edge
//! borders, their adjoints, and kernel gradients.
//!
//! Convention: `out[x] = sum_i k[i] * in[clamp(x + r - i)]` with
//! `r = (k.len() - 1) / 2`.

use crate::image::ImageBuf;

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn pad_row(row: &[f64], r: usize, padded: &mut Vec<f64>) {
    let n = row.len();
    padded.clear();
    padded.extend((0..r).map(|_| row[0]));
    padded.extend_from_slice(row);
    padded.extend((0..r).map(|_| row[n - 1]));
}

/// Horizontal convolution of one plane.
pub fn conv_rows(src: &[f64], w: usize, k: &[f64], dst: &mut [f64]) {
    let r = k.len() / 2;
    let mut padded = Vec::with_capacity(w + 2 * r);
    for (s, d) in src.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
        pad_row(s, r, &mut padded);
        for (x, o) in d.iter_mut().enumerate() {
            // padded[x + 2r - i] == row[clamp(x + r - i)]
            let win = &padded[x..x + 2 * r + 1];
            *o = k.iter().zip(win.iter().rev()).map(|(a, b)| a * b).sum();
        }
    }
}

/// Vertical convolution of one plane.
pub fn conv_cols(src: &[f64], w: usize, h: usize, k: &[f64], dst: &mut [f64]) {
    let r = k.len() as isize / 2;
    for (y, d) in dst.chunks_exact_mut(w).enumerate() {
        d.iter_mut().for_each(|v| *v = 0.0);
        for (i, &kv) in k.iter().enumerate() {
            let sy = clamp_index(y as isize + r - i as isize, h);
            for (o, s) in d.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                *o += kv * s;
            }
        }
    }
}

/// Adjoint of [`conv_rows`] with respect to its input; accumulates into `dst`.
pub fn conv_rows_adjoint(grad: &[f64], w: usize, k: &[f64], dst: &mut [f64]) {
    let r = k.len() as isize / 2;
    for (g, d) in grad.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
        for (x, &gv) in g.iter().enumerate() {
            for (i, &kv) in k.iter().enumerate() {
                d[clamp_index(x as isize + r - i as isize, w)] += kv * gv;
            }
        }
    }
}

/// Adjoint of [`conv_cols`]; accumulates into `dst`.
pub fn conv_cols_adjoint(grad: &[f64], w: usize, h: usize, k: &[f64], dst: &mut [f64]) {
    let r = k.len() as isize / 2;
    for (y, g) in grad.chunks_exact(w).enumerate() {
        for (i, &kv) in k.iter().enumerate() {
            let sy = clamp_index(y as isize + r - i as isize, h);
            for (o, gv) in dst[sy * w..(sy + 1) * w].iter_mut().zip(g) {
                *o += kv * gv;
            }
        }
    }
}

/// d(sum grad * conv_rows(src, k)) / dk, accumulated into `gk`.
pub fn conv_rows_kernel_grad(grad: &[f64], src: &[f64], w: usize, gk: &mut [f64]) {
    let r = gk.len() / 2;
    let mut padded = Vec::with_capacity(w + 2 * r);
    for (g, s) in grad.chunks_exact(w).zip(src.chunks_exact(w)) {
        pad_row(s, r, &mut padded);
        for (i, acc) in gk.iter_mut().enumerate() {
            // in[clamp(x + r - i)] == padded[x + 2r - i]
            let off = 2 * r - i;
            *acc += g.iter().zip(&padded[off..off + w]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// d(sum grad * conv_cols(src, k)) / dk, accumulated into `gk`.
pub fn conv_cols_kernel_grad(grad: &[f64], src: &[f64], w: usize, h: usize, gk: &mut [f64]) {
    let r = gk.len() as isize / 2;
    for (y, g) in grad.chunks_exact(w).enumerate() {
        for (i, acc) in gk.iter_mut().enumerate() {
            let sy = clamp_index(y as isize + r - i as isize, h);
            *acc += g
                .iter()
                .zip(&src[sy * w..(sy + 1) * w])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    }
}

/// `(img * kx) * ky` on every channel.
pub fn separable_conv(img: &ImageBuf, kx: &[f64], ky: &[f64]) -> ImageBuf {
    let (w, h) = (img.width(), img.height());
    let mut out = img.zeros_like();
    let mut tmp = vec![0.0; w * h];
    for c in 0..img.channels() {
        conv_rows(img.plane(c), w, kx, &mut tmp);
        conv_cols(&tmp, w, h, ky, out.plane_mut(c));
    }
    out
}

/// Backward of [`separable_conv`]: returns `(grad_input, grad_kx, grad_ky)`.
pub fn separable_conv_bwd(
    grad: &ImageBuf,
    input: &ImageBuf,
    kx: &[f64],
    ky: &[f64],
) -> (ImageBuf, Vec<f64>, Vec<f64>) {
    let (w, h) = (input.width(), input.height());
    let mut grad_in = input.zeros_like();
    let mut gkx = vec![0.0; kx.len()];
    let mut gky = vec![0.0; ky.len()];
    let mut mid = vec![0.0; w * h];
    let mut grad_mid = vec![0.0; w * h];
    for c in 0..input.channels() {
        conv_rows(input.plane(c), w, kx, &mut mid);
        conv_cols_kernel_grad(grad.plane(c), &mid, w, h, &mut gky);
        grad_mid.iter_mut().for_each(|v| *v = 0.0);
        conv_cols_adjoint(grad.plane(c), w, h, ky, &mut grad_mid);
        conv_rows_kernel_grad(&grad_mid, input.plane(c), w, &mut gkx);
        conv_rows_adjoint(&grad_mid, w, kx, grad_in.plane_mut(c));
    }
    (grad_in, gkx, gky)
}
