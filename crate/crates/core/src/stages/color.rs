//! Per-pixel affine color transform `rgb' = M rgb + t`.

use crate::error::Result;
use crate::image::ImageBuf;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorMapParams {
    /// Row-major 3x3 matrix.
    pub m: [[f64; 3]; 3],
    pub t: [f64; 3],
}

impl Default for ColorMapParams {
    fn default() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }
}

impl ColorMapParams {
    pub fn zeros() -> Self {
        Self {
            m: [[0.0; 3]; 3],
            t: [0.0; 3],
        }
    }

    /// `m` row-major followed by `t`.
    pub fn to_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 3..r * 3 + 3].copy_from_slice(&self.m[r]);
        }
        out[9..].copy_from_slice(&self.t);
        out
    }

    pub fn from_array(v: &[f64; 12]) -> Self {
        let mut p = Self::zeros();
        for r in 0..3 {
            p.m[r].copy_from_slice(&v[r * 3..r * 3 + 3]);
        }
        p.t.copy_from_slice(&v[9..]);
        p
    }
}

#[derive(Debug)]
pub struct ColorMapTape {
    input: ImageBuf,
    params: ColorMapParams,
}

pub fn color_map_apply(img: &ImageBuf, p: &ColorMapParams) -> Result<ImageBuf> {
    img.ensure_channels(3)?;
    let n = img.plane_len();
    let mut out = img.zeros_like();
    let src = img.data();
    let dst = out.data_mut();
    for i in 0..n {
        let rgb = [src[i], src[n + i], src[2 * n + i]];
        for (r, row) in p.m.iter().enumerate() {
            dst[r * n + i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2] + p.t[r];
        }
    }
    Ok(out)
}

pub fn color_map_fwd(img: &ImageBuf, p: &ColorMapParams) -> Result<(ImageBuf, ColorMapTape)> {
    let out = color_map_apply(img, p)?;
    Ok((
        out,
        ColorMapTape {
            input: img.clone(),
            params: *p,
        },
    ))
}

/// Returns `(grad_input, grad_params)`.
pub fn color_map_bwd(grad_out: &ImageBuf, tape: ColorMapTape) -> (ImageBuf, ColorMapParams) {
    let n = tape.input.plane_len();
    let m = tape.params.m;
    let src = tape.input.data();
    let g = grad_out.data();
    let mut grad_in = tape.input.zeros_like();
    let mut gp = ColorMapParams::zeros();
    let gi = grad_in.data_mut();
    for i in 0..n {
        let rgb = [src[i], src[n + i], src[2 * n + i]];
        let go = [g[i], g[n + i], g[2 * n + i]];
        for r in 0..3 {
            gp.t[r] += go[r];
            for c in 0..3 {
                gp.m[r][c] += go[r] * rgb[c];
            }
        }
        for c in 0..3 {
            gi[c * n + i] = m[0][c] * go[0] + m[1][c] * go[1] + m[2][c] * go[2];
        }
    }
    (grad_in, gp)
}
