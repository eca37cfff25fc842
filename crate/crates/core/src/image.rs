//! Pixel-space RGB images and binary masks.
//!
//! Images hold interleaved `f32` RGB in `[0, 1]`, row-major. PNG I/O goes
//! through 8-bit quantization, so `Image::quantized` is the fixed point of a
//! write/read cycle.

use std::io::Cursor;

use base64::Engine as _;
use image::{GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Luma (BT.601 weights), one value per pixel.
    pub fn to_gray(&self) -> Vec<f32> {
        self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// Take pixels from `other` wherever `mask` is set.
    pub fn blend_masked(&self, other: &Image, mask: &Mask) -> Result<Image> {
        ensure_same_dims(self.dims(), other.dims(), "blend images")?;
        ensure_same_dims(self.dims(), mask.dims(), "blend mask")?;
        let mut out = self.clone();
        for (i, &m) in mask.data().iter().enumerate() {
            if m {
                out.data[i * 3..i * 3 + 3].copy_from_slice(&other.data[i * 3..i * 3 + 3]);
            }
        }
        Ok(out)
    }

    pub fn quantized(&self) -> Image {
        self.map(|v| quantize(v) as f32 / 255.0)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Codec("buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::from_raw(w as usize, h as usize, data)
    }

    pub fn to_base64_png(&self) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_png_bytes()?))
    }

    pub fn from_base64_png(s: &str) -> Result<Image> {
        Image::from_png_bytes(&decode_base64(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn not(&self) -> Mask {
        Mask { width: self.width, height: self.height, data: self.data.iter().map(|b| !b).collect() }
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        ensure_same_dims(self.dims(), other.dims(), "mask operands")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Mask { width: self.width, height: self.height, data })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !(a && b))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn union_all<'a>(width: usize, height: usize, masks: impl IntoIterator<Item = &'a Mask>) -> Result<Mask> {
        let mut acc = Mask::new(width, height);
        for m in masks {
            acc = acc.or(m)?;
        }
        Ok(acc)
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Codec("buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decodes a PNG mask; any pixel with luma >= 128 is inside.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Mask> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v >= 128).collect();
        Mask::from_raw(w as usize, h as usize, data)
    }

    pub fn to_base64_png(&self) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(self.to_png_bytes()?))
    }

    pub fn from_base64_png(s: &str) -> Result<Mask> {
        Mask::from_png_bytes(&decode_base64(s)?)
    }

    /// Morphological dilation with a `kernel`×`kernel` square.
    pub fn dilate(&self, kernel: usize) -> Result<Mask> {
        let r = kernel_radius(kernel)?;
        Ok(self.dilate_radius(r))
    }

    /// Morphological erosion with a `kernel`×`kernel` square. Pixels beyond
    /// the image border count as outside, so shapes touching the border erode
    /// there as well.
    pub fn erode(&self, kernel: usize) -> Result<Mask> {
        let r = kernel_radius(kernel)?;
        Ok(self.erode_radius(r))
    }

    pub(crate) fn dilate_radius(&self, r: usize) -> Mask {
        self.separable(r, |window| window.iter().any(|&b| b), false)
    }

    pub(crate) fn erode_radius(&self, r: usize) -> Mask {
        self.separable(r, |window| window.iter().all(|&b| b), true)
    }

    fn separable(&self, r: usize, reduce: impl Fn(&[bool]) -> bool, erode: bool) -> Mask {
        if r == 0 {
            return self.clone();
        }
        let (w, h) = self.dims();
        let mut window = Vec::with_capacity(2 * r + 1);
        let mut pass = |src: &Mask, horizontal: bool| {
            Mask::from_fn(w, h, |x, y| {
                window.clear();
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                for d in -(r as isize)..=(r as isize) {
                    let p = pos as isize + d;
                    if p < 0 || p >= len as isize {
                        if erode {
                            window.push(false);
                        }
                        continue;
                    }
                    let p = p as usize;
                    window.push(if horizontal { src.get(p, y) } else { src.get(x, p) });
                }
                reduce(&window)
            })
        };
        let tmp = pass(self, true);
        pass(&tmp, false)
    }
}

fn kernel_radius(kernel: usize) -> Result<usize> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidKernel(kernel));
    }
    Ok((kernel - 1) / 2)
}

pub(crate) fn ensure_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_base64(s: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s.trim())
        .map_err(|e| Error::Codec(format!("base64: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(w: usize, h: usize, x: usize, y: usize) -> Mask {
        let mut m = Mask::new(w, h);
        m.set(x, y, true);
        m
    }

    #[test]
    fn dilate_point_gives_block() {
        let d = point(9, 9, 4, 4).dilate(3).unwrap();
        assert_eq!(d.count(), 9);
        assert_eq!(d.bbox(), Some((3, 3, 5, 5)));
    }

    #[test]
    fn kernel_one_is_identity() {
        let m = Mask::from_fn(10, 7, |x, y| (x * 3 + y) % 5 == 0);
        assert_eq!(m.dilate(1).unwrap(), m);
        assert_eq!(m.erode(1).unwrap(), m);
    }

    #[test]
    fn even_kernel_rejected() {
        let m = Mask::new(4, 4);
        assert!(matches!(m.dilate(2), Err(Error::InvalidKernel(2))));
        assert!(matches!(m.erode(0), Err(Error::InvalidKernel(0))));
    }

    #[test]
    fn erode_block_to_center() {
        let m = Mask::from_fn(9, 9, |x, y| (3..=5).contains(&x) && (3..=5).contains(&y));
        let e = m.erode(3).unwrap();
        assert_eq!(e.count(), 1);
        assert!(e.get(4, 4));
        assert!(Mask::new(5, 5).erode(3).unwrap().is_empty());
    }

    #[test]
    fn png_roundtrip_is_quantization() {
        let img = Image::from_fn(5, 3, |x, y| [x as f32 / 4.0, y as f32 / 2.0, 0.3337]);
        let back = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
        let m = Mask::from_fn(5, 3, |x, y| x == y);
        assert_eq!(Mask::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap(), m);
    }
}
