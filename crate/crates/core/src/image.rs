//! Dense multi-channel images and label maps.
//!
//! All images are row-major, pixel-interleaved: the value of channel `c` at
//! column `x`, row `y` lives at `(y * width + x) * channels + c`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::dims(
                format!("{width}x{height}x{channels} = {}", width * height * channels),
                data.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, c)` at every entry.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    /// Value with replicate padding for out-of-range coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y, c)
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dims(self.shape_string(), other.shape_string()))
        }
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Extracts a single channel as a one-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Reorders channels: output channel `i` is input channel `order[i]`.
    pub fn permute_channels(&self, order: &[usize]) -> Image {
        Image::from_fn(self.width, self.height, order.len(), |x, y, c| {
            self.get(x, y, order[c])
        })
    }

    /// Swaps rows and columns.
    pub fn transpose(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |x, y, c| {
            self.get(y, x, c)
        })
    }

    pub fn scale(&self, s: f64) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Per-channel min-max normalization to `[0, 1]`. A constant channel maps to 0.
    pub fn normalize_per_channel(&self) -> Image {
        let mut lo = vec![f64::INFINITY; self.channels];
        let mut hi = vec![f64::NEG_INFINITY; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (c, &v) in px.iter().enumerate() {
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(self.channels) {
            for (c, v) in px.iter_mut().enumerate() {
                let range = hi[c] - lo[c];
                *v = if range > 0.0 { (*v - lo[c]) / range } else { 0.0 };
            }
        }
        out
    }

    /// 2x2 box downsampling. Width and height must be even.
    pub fn downsample2(&self) -> Result<Image> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::invalid(format!(
                "downsample2 needs even dimensions, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(
            self.width / 2,
            self.height / 2,
            self.channels,
            |x, y, c| {
                0.25 * (self.get(2 * x, 2 * y, c)
                    + self.get(2 * x + 1, 2 * y, c)
                    + self.get(2 * x, 2 * y + 1, c)
                    + self.get(2 * x + 1, 2 * y + 1, c))
            },
        ))
    }

    /// Separable Gaussian blur with a `(2r+1)`-tap kernel and replicate padding.
    pub fn gaussian_blur(&self, radius: usize, sigma: f64) -> Image {
        let kernel = gaussian_kernel(radius, sigma);
        let r = radius as isize;
        let horiz = Image::from_fn(self.width, self.height, self.channels, |x, y, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * self.get_clamped(x as isize + k as isize - r, y as isize, c))
                .sum()
        });
        Image::from_fn(self.width, self.height, self.channels, |x, y, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * horiz.get_clamped(x as isize, y as isize + k as isize - r, c))
                .sum()
        })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    /// Writes a 1- or 3-channel image in `[0, 1]` as an 8-bit PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer size")
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer size")
                .save(path)?,
            c => {
                return Err(Error::Format(format!(
                    "png export supports 1 or 3 channels, got {c}"
                )))
            }
        }
        Ok(())
    }

    /// Loads an 8-bit PNG as a 3-channel image in `[0, 1]`.
    pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::from_vec(w as usize, h as usize, 3, data)
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Normalized 1-D Gaussian taps, `2 * radius + 1` long.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Per-pixel semantic class map. [`LabelImage::BACKGROUND`] marks empty pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelImage {
    width: usize,
    height: usize,
    labels: Vec<u16>,
}

impl LabelImage {
    pub const BACKGROUND: u16 = u16::MAX;

    pub fn new(width: usize, height: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::dims(width * height, labels.len()));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, label: u16) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u16) {
        self.labels[y * self.width + x] = label;
    }

    /// Binary mask (1 inside `class`, 0 elsewhere) as a one-channel image.
    pub fn mask(&self, class: u16) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| {
            if self.get(x, y) == class {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Writes labels as an 8-bit grayscale PNG; background is stored as 255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self
            .labels
            .iter()
            .map(|&l| {
                if l == Self::BACKGROUND {
                    Ok(255u8)
                } else if l < 255 {
                    Ok(l as u8)
                } else {
                    Err(Error::Format(format!("label {l} does not fit an 8-bit png")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size")
            .save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let labels = img
            .into_raw()
            .into_iter()
            .map(|b| if b == 255 { Self::BACKGROUND } else { b as u16 })
            .collect();
        Self::new(w as usize, h as usize, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constant() {
        let img = Image::filled(7, 5, 2, 0.25);
        let b = img.gaussian_blur(2, 2.0);
        for v in b.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_constant_channel_is_zero() {
        let img = Image::from_fn(4, 4, 2, |x, _, c| if c == 0 { 3.0 } else { x as f64 });
        let n = img.normalize_per_channel();
        assert!(n.channel(0).data().iter().all(|&v| v == 0.0));
        assert_eq!(n.get(3, 0, 1), 1.0);
        assert_eq!(n.get(0, 0, 1), 0.0);
    }

    #[test]
    fn downsample_averages() {
        let img = Image::from_fn(2, 2, 1, |x, y, _| (x + 2 * y) as f64);
        let d = img.downsample2().unwrap();
        assert_eq!(d.data(), &[1.5]);
        assert!(Image::zeros(3, 2, 1).downsample2().is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 3, 3, |x, y, c| ((x + y + c) % 3) as f64 / 2.0);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_rgb_png(&p).unwrap();
        assert!(img.mean_abs_diff(&back).unwrap() < 1.0 / 255.0);

        let labels = LabelImage::new(2, 2, vec![0, 3, LabelImage::BACKGROUND, 7]).unwrap();
        let lp = dir.path().join("l.png");
        labels.save_png(&lp).unwrap();
        assert_eq!(LabelImage::load_png(&lp).unwrap(), labels);
    }
}
