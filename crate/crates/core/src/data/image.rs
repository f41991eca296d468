//! 8-bit images and binary PGM/PPM files.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel-major 8-bit image, `pixels[(c·H + y)·W + x]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || height == 0 || width == 0 || pixels.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{} pixels do not form a {channels}x{height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Self { channels, height, width, pixels })
    }

    /// All-zero pseudo image.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, pixels: vec![0; channels * height * width] }
    }

    pub fn is_zero(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.pixels.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// `[C, H, W]` with values `p / 255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let inv = 1.0 / 255.0;
        let data = self.pixels.iter().map(|&p| T::real(p as f64 * inv)).collect();
        Tensor::new([self.channels, self.height, self.width], data).expect("image dimensions are validated")
    }

    /// Interleaved (`HWC`) byte order used by the file formats.
    fn interleaved(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        (0..hw).flat_map(|i| (0..self.channels).map(move |c| c * hw + i)).map(|j| self.pixels[j]).collect()
    }

    fn from_interleaved(channels: usize, height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        let hw = height * width;
        let mut pixels = vec![0; channels * hw];
        for (i, px) in raw.chunks(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                pixels[c * hw + i] = v;
            }
        }
        Self::new(channels, height, width, pixels)
    }

    /// Binary PGM for one channel, PPM for three; maxval 255.
    pub fn encode_pnm(&self) -> Result<Vec<u8>> {
        let (subtype, color) = match self.channels {
            1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
            _ => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
        };
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(subtype)
            .write_image(&self.interleaved(), self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Argument(format!("cannot encode image: {e}")))?;
        Ok(out)
    }

    pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Self> {
        let decoded = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Pnm)
            .decode()
            .map_err(|e| Error::format(path, e.to_string()))?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        match decoded {
            DynamicImage::ImageLuma8(img) => Self::from_interleaved(1, h, w, img.as_raw()),
            DynamicImage::ImageRgb8(img) => Self::from_interleaved(3, h, w, img.as_raw()),
            other => Err(Error::format(path, format!("unsupported pixel format {:?}; expected maxval 255", other.color()))),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pnm(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pnm()?).map_err(|e| Error::io(path, e))
    }
}
