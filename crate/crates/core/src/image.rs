//! Planar floating-point images and the per-sample operations on them.

use crate::error::{Error, Result};

/// Rec. 709 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Default display gamma.
pub const DEFAULT_GAMMA: f64 = 2.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    GammaEncoded,
    Linear,
}

/// Channel-major planar image: sample `(c, x, y)` lives at
/// `data[c * width * height + y * width + x]`.
///
/// Values are not clamped; intermediate pipeline stages routinely
/// produce samples outside `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
    color_space: ColorSpace,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, channels: usize, color_space: ColorSpace) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            color_space,
        }
    }

    pub fn filled(
        width: usize,
        height: usize,
        channels: usize,
        value: f64,
        color_space: ColorSpace,
    ) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            color_space,
        }
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
        color_space: ColorSpace,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::LengthMismatch(data.len(), width * height * channels));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
            color_space,
        })
    }

    /// Builds an image by evaluating `f(c, x, y)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        color_space: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
            color_space,
        }
    }

    /// A zeroed image with the same shape and tag.
    pub fn zeros_like(&self) -> Self {
        Self::new(self.width, self.height, self.channels, self.color_space)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn set_color_space(&mut self, cs: ColorSpace) {
        self.color_space = cs;
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let n = self.plane_len();
        self.data[c * n + y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn ensure_channels(&self, expected: usize) -> Result<()> {
        if self.channels != expected {
            return Err(Error::ChannelMismatch {
                expected,
                actual: self.channels,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_same_shape(&self, other: &ImageBuf) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuf {
        ImageBuf {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone_shape()
        }
    }

    pub fn clamp01(&self) -> ImageBuf {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Sum of `self * other` over all samples.
    pub fn dot(&self, other: &ImageBuf) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ImageBuf) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &ImageBuf) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn clone_shape(&self) -> ImageBuf {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: Vec::new(),
            color_space: self.color_space,
        }
    }
}

fn check_nonnegative(img: &ImageBuf) -> Result<()> {
    match img.data.iter().position(|&v| v < 0.0) {
        Some(index) => Err(Error::NegativeSample {
            index,
            value: img.data[index],
        }),
        None => Ok(()),
    }
}

/// Applies `v^gamma` to every sample and tags the result linear.
pub fn to_linear(img: &ImageBuf, gamma: f64) -> Result<ImageBuf> {
    check_nonnegative(img)?;
    let mut out = img.map(|v| v.powf(gamma));
    out.color_space = ColorSpace::Linear;
    Ok(out)
}

/// Applies `v^(1/gamma)` to every sample and tags the result gamma-encoded.
pub fn to_gamma(img: &ImageBuf, gamma: f64) -> Result<ImageBuf> {
    check_nonnegative(img)?;
    let inv = 1.0 / gamma;
    let mut out = img.map(|v| v.powf(inv));
    out.color_space = ColorSpace::GammaEncoded;
    Ok(out)
}

/// Single-channel Rec. 709 luma of an RGB image.
pub fn luma(img: &ImageBuf) -> Result<ImageBuf> {
    img.ensure_channels(3)?;
    let n = img.plane_len();
    let (r, rest) = img.data.split_at(n);
    let (g, b) = rest.split_at(n);
    let [wr, wg, wb] = LUMA_WEIGHTS;
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| wr * r + wg * g + wb * b)
        .collect();
    Ok(ImageBuf {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
        color_space: img.color_space,
    })
}

/// Copies the `w`x`h` rectangle whose top-left corner is `(x0, y0)`.
pub fn crop(img: &ImageBuf, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuf> {
    if x0 + w > img.width || y0 + h > img.height {
        return Err(Error::OutOfBounds {
            x0,
            y0,
            w,
            h,
            width: img.width,
            height: img.height,
        });
    }
    let mut data = Vec::with_capacity(w * h * img.channels);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in y0..y0 + h {
            let row = y * img.width;
            data.extend_from_slice(&plane[row + x0..row + x0 + w]);
        }
    }
    Ok(ImageBuf {
        width: w,
        height: h,
        channels: img.channels,
        data,
        color_space: img.color_space,
    })
}

/// Adjoint of [`crop`]: places `grad` into a zero image of the original size.
pub fn uncrop(
    grad: &ImageBuf,
    x0: usize,
    y0: usize,
    full_width: usize,
    full_height: usize,
) -> Result<ImageBuf> {
    if x0 + grad.width > full_width || y0 + grad.height > full_height {
        return Err(Error::OutOfBounds {
            x0,
            y0,
            w: grad.width,
            h: grad.height,
            width: full_width,
            height: full_height,
        });
    }
    let mut out = ImageBuf::new(full_width, full_height, grad.channels, grad.color_space);
    for c in 0..grad.channels {
        let src = grad.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad.height {
            let d = (y0 + y) * full_width + x0;
            dst[d..d + grad.width].copy_from_slice(&src[y * grad.width..(y + 1) * grad.width]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImageBuf {
        let rng = CounterRng::new(seed, 0);
        ImageBuf::from_fn(w, h, c, ColorSpace::GammaEncoded, |c, x, y| {
            rng.uniform_at(((c * h + y) * w + x) as u64)
        })
    }

    #[test]
    fn gamma_fixed_points_and_value() {
        let img = ImageBuf::from_vec(3, 1, 1, vec![0.0, 1.0, 0.5], ColorSpace::GammaEncoded)
            .unwrap();
        let lin = to_linear(&img, 2.2).unwrap();
        assert_eq!(lin.data()[0], 0.0);
        assert_eq!(lin.data()[1], 1.0);
        assert!((lin.data()[2] - 0.217_637_640_824_031).abs() < 1e-12);
        assert_eq!(lin.color_space(), ColorSpace::Linear);
        let back = to_gamma(&lin, 2.2).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 1.0);
        assert_eq!(back.color_space(), ColorSpace::GammaEncoded);
    }

    #[test]
    fn gamma_round_trip() {
        let img = random_image(16, 16, 3, 3);
        let back = to_gamma(&to_linear(&img, 2.2).unwrap(), 2.2).unwrap();
        assert!(back.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn gamma_rejects_negative() {
        let img = ImageBuf::from_vec(2, 1, 1, vec![0.1, -0.5], ColorSpace::Linear).unwrap();
        assert!(matches!(
            to_gamma(&img, 2.2),
            Err(Error::NegativeSample { index: 1, .. })
        ));
        assert!(to_linear(&img, 2.2).is_err());
    }

    #[test]
    fn luma_weights() {
        let white = ImageBuf::filled(1, 1, 3, 1.0, ColorSpace::GammaEncoded);
        assert!((luma(&white).unwrap().data()[0] - 1.0).abs() < 1e-15);
        let red = ImageBuf::from_vec(1, 1, 3, vec![1.0, 0.0, 0.0], ColorSpace::GammaEncoded)
            .unwrap();
        assert_eq!(luma(&red).unwrap().data()[0], 0.2126);
    }

    #[test]
    fn luma_matches_pixel_loop() {
        let img = random_image(7, 5, 3, 11);
        let l = luma(&img).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let expect = 0.2126 * img.get(0, x, y)
                    + 0.7152 * img.get(1, x, y)
                    + 0.0722 * img.get(2, x, y);
                assert_eq!(l.get(0, x, y), expect);
            }
        }
        assert!(luma(&l).is_err());
    }

    #[test]
    fn crop_cases() {
        let img = ImageBuf::from_vec(2, 1, 3, vec![1., 0., 0., 1., 0., 0.], ColorSpace::GammaEncoded)
            .unwrap();
        assert_eq!(crop(&img, 0, 0, 2, 1).unwrap(), img);
        let px = crop(&img, 1, 0, 1, 1).unwrap();
        assert_eq!(px.data(), &[0.0, 1.0, 0.0]);
        assert!(matches!(
            crop(&img, 1, 0, 2, 1),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn nested_crops_compose() {
        let img = random_image(20, 17, 3, 5);
        let outer = crop(&img, 3, 2, 12, 11).unwrap();
        let inner = crop(&outer, 4, 5, 6, 3).unwrap();
        assert_eq!(inner, crop(&img, 7, 7, 6, 3).unwrap());
    }

    #[test]
    fn uncrop_is_crop_adjoint() {
        let img = random_image(9, 8, 3, 7);
        let g = random_image(4, 3, 3, 8);
        let lhs = crop(&img, 2, 4, 4, 3).unwrap().dot(&g);
        let rhs = img.dot(&uncrop(&g, 2, 4, 9, 8).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
