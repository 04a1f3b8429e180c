//! Single-channel working rasters, retained chroma, and PNG I/O.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A registered single-channel raster with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(height * width, data.len(), "image buffer size");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
    }

    /// Interpret a `[1,1,H,W]` (or `[H,W]`) tensor as an image.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        assert_eq!(t.numel(), h * w, "from_tensor expects a single plane, got {s:?}");
        Self::new(h, w, t.data().to_vec())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width, "crop out of bounds");
        Self::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    /// Reflect-pad on the bottom and right edges (no edge repeat).
    pub fn pad_reflect(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        Self::from_fn(height, width, |y, x| self.get(reflect(y, self.height), reflect(x, self.width)))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }
}

pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Chroma planes retained from a colour visible image (BT.601 full range,
/// stored in `[0, 1]` with 0.5 neutral).
#[derive(Clone, Debug, PartialEq)]
pub struct Chroma {
    pub cb: Image,
    pub cr: Image,
}

impl Chroma {
    pub fn neutral(height: usize, width: usize) -> Self {
        Self {
            cb: Image::filled(height, width, 0.5),
            cr: Image::filled(height, width, 0.5),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            cb: self.cb.crop(top, left, height, width),
            cr: self.cr.crop(top, left, height, width),
        }
    }
}

pub fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 0.5 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 0.5 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    (y, cb, cr)
}

pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * (cr - 0.5);
    let g = y - 0.344_136 * (cb - 0.5) - 0.714_136 * (cr - 0.5);
    let b = y + 1.772 * (cb - 0.5);
    (r, g, b)
}

/// Split interleaved RGB in `[0,1]` into luminance and chroma.
pub fn split_ycbcr(height: usize, width: usize, rgb: &[f64]) -> (Image, Chroma) {
    let n = height * width;
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in rgb.chunks(3) {
        let (a, b, c) = rgb_to_ycbcr(px[0], px[1], px[2]);
        y.push(a);
        cb.push(b);
        cr.push(c);
    }
    (
        Image::new(height, width, y),
        Chroma {
            cb: Image::new(height, width, cb),
            cr: Image::new(height, width, cr),
        },
    )
}

/// Recombine luminance with chroma into interleaved RGB in `[0,1]`.
pub fn merge_ycbcr(y: &Image, chroma: &Chroma) -> Vec<f64> {
    assert_eq!(y.dims(), chroma.cb.dims());
    let mut out = Vec::with_capacity(3 * y.data.len());
    for i in 0..y.data.len() {
        let (r, g, b) = ycbcr_to_rgb(y.data[i], chroma.cb.data[i], chroma.cr.data[i]);
        out.extend([r, g, b]);
    }
    out
}

/// Pixels of an 8-bit PNG as `(height, width, channels, samples)`; 16-bit and
/// alpha inputs are reduced to 8-bit gray or RGB.
fn decode_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::unreadable(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().channel_count() >= 3 {
        Ok((h, w, 3, img.into_rgb8().into_raw()))
    } else {
        Ok((h, w, 1, img.into_luma8().into_raw()))
    }
}

/// Load a visible image: colour inputs are split into Y plus retained
/// chroma, gray inputs get neutral chroma.
pub fn load_visible(path: &Path) -> Result<(Image, Chroma)> {
    let (h, w, c, raw) = decode_png(path)?;
    let scaled: Vec<f64> = raw.iter().map(|&v| f64::from(v) / 255.0).collect();
    if c == 3 {
        Ok(split_ycbcr(h, w, &scaled))
    } else {
        Ok((Image::new(h, w, scaled), Chroma::neutral(h, w)))
    }
}

/// Load a single-channel image (colour inputs are reduced to BT.601 luma).
pub fn load_gray(path: &Path) -> Result<Image> {
    load_visible(path).map(|(y, _)| y)
}

/// Raw 8-bit single-channel samples, rejecting colour files.
pub fn load_gray_u8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, c, raw) = decode_png(path)?;
    if c != 1 {
        return Err(Error::MalformedMaskFile {
            path: path.to_path_buf(),
            reason: format!("expected 1 channel, found {c}"),
        });
    }
    Ok((h, w, raw))
}

pub fn save_gray_u8(path: &Path, height: usize, width: usize, samples: Vec<u8>) -> Result<()> {
    let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(width as u32, height as u32, samples)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::unreadable(path, e))
}

pub fn save_gray(path: &Path, img: &Image) -> Result<()> {
    save_gray_u8(path, img.height, img.width, img.to_u8())
}

pub fn save_rgb(path: &Path, height: usize, width: usize, rgb: &[f64]) -> Result<()> {
    let samples: Vec<u8> = rgb.iter().map(|&v| quantize(v)).collect();
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, samples)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::unreadable(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_rgb_has_neutral_chroma() {
        for v in [0.0, 0.3, 1.0] {
            let (_, cb, cr) = rgb_to_ycbcr(v, v, v);
            assert!((cb - 0.5).abs() < 1e-12 && (cr - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn ycbcr_roundtrip_within_one_level() {
        // independent oracle: the forward matrix and the closed-form inverse
        let mut worst: f64 = 0.0;
        for r in (0..=255).step_by(17) {
            for g in (0..=255).step_by(15) {
                for b in (0..=255).step_by(51) {
                    let rgb = [r, g, b].map(|v| f64::from(v) / 255.0);
                    let (y, cb, cr) = rgb_to_ycbcr(rgb[0], rgb[1], rgb[2]);
                    let y8 = f64::from(quantize(y)) / 255.0;
                    let back = ycbcr_to_rgb(y8, cb, cr);
                    for (orig, rec) in rgb.iter().zip([back.0, back.1, back.2]) {
                        worst = worst.max((orig - rec).abs());
                    }
                }
            }
        }
        assert!(worst <= 1.0 / 255.0, "worst channel error {worst}");
    }

    #[test]
    fn png_roundtrip_and_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_gray_u8(&p, 2, 3, vec![0, 255, 128, 1, 2, 3]).unwrap();
        let img = load_gray(&p).unwrap();
        assert_eq!(img.dims(), (2, 3));
        assert_eq!(img.get(0, 1), 1.0);
        assert_eq!(img.get(0, 0), 0.0);
        let (h, w, raw) = load_gray_u8(&p).unwrap();
        assert_eq!((h, w, raw), (2, 3, vec![0, 255, 128, 1, 2, 3]));
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let img = Image::new(1, 3, vec![0.0, 1.0, 2.0]);
        let p = img.pad_reflect(1, 6);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0]);
    }
}
