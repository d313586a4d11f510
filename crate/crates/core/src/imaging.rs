//! RGB face images in `[0, 1]`, stored row-major `H × W × 3`.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    size: usize,
    pixels: Vec<f32>,
}

impl FaceImage {
    /// Black square image.
    pub fn new(size: usize) -> Self {
        Self {
            size,
            pixels: vec![0.0; size * size * 3],
        }
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(size);
        img.pixels.chunks_mut(3).for_each(|p| p.copy_from_slice(&rgb));
        img
    }

    pub fn from_pixels(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if size == 0 {
            return Err(Error::EmptyInput("image"));
        }
        if pixels.len() != size * size * 3 {
            return Err(Error::shape("image pixels", size * size * 3, pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format("pixels", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { size, pixels })
    }

    /// Clamps into `[0, 1]`; non-finite values become 0.
    pub fn from_f64_clamped(size: usize, values: &[f64]) -> Result<Self> {
        let px = values
            .iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) as f32 } else { 0.0 })
            .collect();
        Self::from_pixels(size, px)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.size + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }

    /// Copy with every masked pixel set to black.
    pub fn masked_out(&self, mask: &Mask) -> FaceImage {
        let mut out = self.clone();
        for (i, &m) in mask.bits().iter().enumerate() {
            if m {
                out.pixels[i * 3..i * 3 + 3].fill(0.0);
            }
        }
        out
    }

    /// Pixels from `inside` where `mask` is set, from `self` elsewhere.
    pub fn composite(&self, inside: &FaceImage, mask: &Mask) -> Result<FaceImage> {
        if inside.size != self.size || mask.size() != self.size {
            return Err(Error::shape("composite size", self.size, inside.size.max(mask.size())));
        }
        let mut out = self.clone();
        for (i, &m) in mask.bits().iter().enumerate() {
            if m {
                out.pixels[i * 3..i * 3 + 3].copy_from_slice(&inside.pixels[i * 3..i * 3 + 3]);
            }
        }
        Ok(out)
    }

    /// Rounds to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> FaceImage {
        FaceImage {
            size: self.size,
            pixels: self.pixels.iter().map(|&v| quantize(v)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let n = self.size as u32;
        let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(n, n, self.to_rgb8()).expect("buffer sized by construction");
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<FaceImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        if rgb.width() != rgb.height() {
            return Err(Error::format(
                path.display().to_string(),
                format!("image is {}x{}, expected square", rgb.width(), rgb.height()),
            ));
        }
        let px = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        FaceImage::from_pixels(rgb.width() as usize, px)
    }
}

pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f32> = (0..8 * 8 * 3).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let img = FaceImage::from_pixels(8, px).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(FaceImage::load_png(&p).unwrap(), img);
    }

    #[test]
    fn composite_respects_mask() {
        let a = FaceImage::filled(4, [0.2, 0.2, 0.2]);
        let b = FaceImage::filled(4, [0.9, 0.1, 0.1]);
        let mut m = Mask::new(4);
        m.set(1, 2, true);
        let c = a.composite(&b, &m).unwrap();
        assert_eq!(c.get(1, 2), [0.9, 0.1, 0.1]);
        assert_eq!(c.get(0, 0), [0.2, 0.2, 0.2]);
        assert_eq!(a.masked_out(&m).get(1, 2), [0.0; 3]);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(FaceImage::from_pixels(1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(FaceImage::from_pixels(2, vec![0.0; 3]).is_err());
    }
}
