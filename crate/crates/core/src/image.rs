//! Raster types shared by the generator, the model and the metrics.

use candle_core::{Device, Tensor};
use image::{GrayImage, Luma, RgbImage};
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB tile.
pub type Tile = RgbImage;

/// A binary mask stored row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.count())
    }
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(width * height, bits.len()));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// Foreground pixel coordinates as `(x, y)`.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Number of pixels where the two masks disagree.
    pub fn disagreement(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Mask::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] >= 128
        })
    }
}

/// Converts a tile to a `(1, 3, H, W)` tensor normalized to `[-1, 1]`.
pub fn tile_to_tensor(tile: &Tile, device: &Device) -> Result<Tensor> {
    let (w, h) = (tile.width() as usize, tile.height() as usize);
    let raw = tile.as_raw();
    let mut data = vec![0f32; 3 * w * h];
    for c in 0..3 {
        for i in 0..w * h {
            data[c * w * h + i] = raw[i * 3 + c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), device)?)
}

/// Stacks tiles into a `(N, 3, H, W)` normalized batch.
pub fn tiles_to_tensor(tiles: &[&Tile], device: &Device) -> Result<Tensor> {
    let parts = tiles
        .iter()
        .map(|t| tile_to_tensor(t, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Inverse of [`tile_to_tensor`] for a `(1, 3, H, W)` or `(3, H, W)` tensor.
/// Values are clamped into the valid 8-bit range.
pub fn tensor_to_tile(t: &Tensor) -> Result<Tile> {
    let t = match t.rank() {
        4 => t.squeeze(0)?,
        3 => t.clone(),
        _ => return Err(Error::shape("(1, 3, H, W)", t.dims())),
    };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape("3 channels", c));
    }
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    let mut raw = vec![0u8; 3 * w * h];
    for ch in 0..3 {
        for i in 0..w * h {
            let x = (v[ch * w * h + i] + 1.0) * 127.5;
            raw[i * 3 + ch] = x.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims"))
}

pub fn save_tile(tile: &Tile, path: &Path) -> Result<()> {
    tile.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_tile(path: &Path) -> Result<Tile> {
    let img = image::open(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    mask.to_gray()
        .save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    Ok(Mask::from_gray(&img.to_luma8()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_exact_on_u8() {
        let tile = RgbImage::from_fn(8, 4, |x, y| image::Rgb([x as u8 * 30, y as u8 * 60, 255]));
        let t = tile_to_tensor(&tile, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 4, 8]);
        assert_eq!(tensor_to_tile(&t).unwrap(), tile);
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let t = Tensor::new(&[[[3.0f32]], [[-7.0]], [[0.0]]], &Device::Cpu).unwrap();
        let tile = tensor_to_tile(&t).unwrap();
        assert_eq!(tile.get_pixel(0, 0).0, [255, 0, 128]);
    }

    #[test]
    fn mask_set_ops() {
        let a = Mask::from_fn(4, 4, |x, _| x < 2);
        let b = Mask::from_fn(4, 4, |_, y| y < 2);
        assert_eq!(a.and(&b).count(), 4);
        assert_eq!(a.or(&b).count(), 12);
        assert!(a.and(&b).is_subset_of(&a));
        assert_eq!(a.disagreement(&b), 8);
        assert_eq!(Mask::from_gray(&a.to_gray()), a);
    }
}
