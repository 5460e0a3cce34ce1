//! Dense row-major raster with an arbitrary channel count, plus PNG I/O.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("unsupported channel count {0} for PNG export")]
    Channels(usize),
    #[error("expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    Dimensions {
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
}

/// `height × width × channels` values stored row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
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

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * channels, "image buffer size");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y) + c;
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
            ..*self
        }
    }

    /// Quantizes to 8 bits per channel after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Encodes a 1- or 3-channel image as an 8-bit PNG.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(ImageError::Channels(n)),
        };
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// Decodes a PNG into an RGB image with values in `[0, 1]`.
    pub fn decode_png_rgb(bytes: &[u8]) -> Result<Image, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Ok(Image::from_data(w as usize, h as usize, 3, data))
    }

    /// Decodes a PNG into a single-channel image with values in `[0, 1]`.
    pub fn decode_png_gray(bytes: &[u8]) -> Result<Image, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Ok(Image::from_data(w as usize, h as usize, 1, data))
    }

    pub fn load_png_rgb(path: &Path) -> Result<Image, ImageError> {
        Self::decode_png_rgb(&std::fs::read(path)?)
    }
}
