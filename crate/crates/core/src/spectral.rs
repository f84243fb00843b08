//! Grayscale-spectrum generation and channel expansion.
//!
//! Visible images are replaced by their luma rendering so that both network
//! paths see infrared-like single-spectrum inputs. The single channel is then
//! copied into three channels so the tensors line up with the infrared side.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Luma weights applied to the red, green and blue channels.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Value convention of an image buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PixelRange {
    /// Intensities in `[0, 255]`.
    #[default]
    Byte,
    /// Normalized intensities in `[0, 1]`.
    Unit,
}

impl PixelRange {
    pub fn max_value(self) -> f64 {
        match self {
            PixelRange::Byte => 255.0,
            PixelRange::Unit => 1.0,
        }
    }

    pub fn contains(self, value: f64) -> bool {
        (0.0..=self.max_value()).contains(&value)
    }
}

/// Interleaved (HWC) image buffer with an explicit channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    range: PixelRange,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, range: PixelRange, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !range.contains(**v)) {
            return Err(Error::Validation(format!(
                "pixel value {v} at offset {i} outside [0, {}]",
                range.max_value()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, range: PixelRange, value: f64) -> Result<Self> {
        Self::new(height, width, channels, range, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> PixelRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Reads an 8-bit image file as a three-channel byte-range image.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let dynamic = image::open(path.as_ref())?;
        Ok(Self::from_dynamic(&dynamic))
    }

    pub fn from_dynamic(dynamic: &image::DynamicImage) -> Self {
        let rgb = dynamic.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| f64::from(v)).collect();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            range: PixelRange::Byte,
            data,
        }
    }

    /// Quantizes to 8 bits with round-half-up and writes a PNG/JPEG by extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let scale = 255.0 / self.range.max_value();
        let bytes: Vec<u8> = self.data.iter().map(|&v| round_half_up(v * scale) as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer length checked at construction")
                .save(path)?,
            c => return Err(Error::Shape(format!("cannot encode {c}-channel image"))),
        }
        Ok(())
    }

    /// Bilinear resize to `(height, width)`; returns `self` unchanged when sizes match.
    pub fn resized(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        if self.channels != 3 {
            return Err(Error::Shape("resize expects a three-channel image".into()));
        }
        let scale = 255.0 / self.range.max_value();
        let bytes: Vec<u8> = self.data.iter().map(|&v| round_half_up(v * scale) as u8).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length checked at construction");
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        let data = out.as_raw().iter().map(|&v| f64::from(v) / scale).collect();
        Self::new(height, width, 3, self.range, data)
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Weighted luma of one RGB triple.
#[inline]
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    // The weights sum to one, so achromatic pixels map to themselves exactly.
    if r == g && g == b {
        return r;
    }
    LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
}

/// Converts an RGB image to a single-channel grayscale-spectrum image in float mode.
pub fn to_grayscale(image: &Image) -> Result<Image> {
    if image.channels != 3 {
        return Err(Error::Shape(format!(
            "grayscale conversion expects 3 channels, got {}",
            image.channels
        )));
    }
    let max = image.range.max_value();
    let data = image
        .data
        .chunks_exact(3)
        // Guards against a 1-ulp overshoot for saturated pixels.
        .map(|px| luma(px[0], px[1], px[2]).clamp(0.0, max))
        .collect();
    Ok(Image {
        height: image.height,
        width: image.width,
        channels: 1,
        range: image.range,
        data,
    })
}

/// Integer-output conversion: luma quantized to the 8-bit grid with round-half-up.
pub fn to_grayscale_quantized(image: &Image) -> Result<Image> {
    let mut gray = to_grayscale(image)?;
    let scale = 255.0 / gray.range.max_value();
    for v in &mut gray.data {
        *v = round_half_up(*v * scale).min(255.0) / scale;
    }
    Ok(gray)
}

/// Copies a single channel into three identical channels.
pub fn expand_channels(image: &Image) -> Result<Image> {
    if image.channels != 1 {
        return Err(Error::Shape(format!(
            "channel expansion expects 1 channel, got {}",
            image.channels
        )));
    }
    let data = image.data.iter().flat_map(|&v| [v, v, v]).collect();
    Ok(Image {
        height: image.height,
        width: image.width,
        channels: 3,
        range: image.range,
        data,
    })
}

/// Full visible-side pipeline: luma conversion followed by channel expansion.
pub fn grayscale_three_channel(image: &Image) -> Result<Image> {
    expand_channels(&to_grayscale(image)?)
}

/// Infrared inputs pass through; single-channel captures are expanded.
pub fn normalize_infrared(image: &Image) -> Result<Image> {
    match image.channels {
        3 => Ok(image.clone()),
        1 => expand_channels(image),
        c => Err(Error::Shape(format!("infrared image with {c} channels"))),
    }
}
