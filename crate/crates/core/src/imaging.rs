//! Raster decoding and the pixel-level transforms applied before denoising
//! and training.

use std::path::Path;

use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel image from a closure over `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Image {
            height,
            width,
            channels: 1,
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.data[(y * self.width + x) * self.channels + c] =
                        self.get(y, self.width - 1 - x, c);
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut out = self.clone();
        let row = self.width * self.channels;
        for y in 0..self.height {
            let src = (self.height - 1 - y) * row;
            out.data[y * row..(y + 1) * row].copy_from_slice(&self.data[src..src + row]);
        }
        out
    }

    /// Writes an 8-bit PNG, mapping `v` to `round(clamp(v, 0, 1) * 255)`.
    pub fn save_debug_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("sized")),
            3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized")),
            c => return Err(Error::UnsupportedFormat(format!("{c}-channel PNG dump"))),
        };
        dynamic
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

/// Decodes a PNG or JPEG. Intensities stay on the 0–255 scale; alpha is
/// dropped, 16-bit samples are reduced to 8 bits.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|message| Error::Decode {
        path: path.to_path_buf(),
        message,
    })
}

pub fn decode_image(bytes: &[u8]) -> std::result::Result<Image, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(format!("unsupported image format {format:?}"));
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = if decoded.color().has_color() {
        (3, decoded.into_rgb8().into_raw())
    } else {
        (1, decoded.into_luma8().into_raw())
    };
    Ok(Image {
        height: h,
        width: w,
        channels,
        data: raw.into_iter().map(f64::from).collect(),
    })
}

/// Rec. 601 luma. Single-channel input is returned unchanged.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    match img.channels {
        1 => Ok(img.clone()),
        3 => Ok(Image {
            height: img.height,
            width: img.width,
            channels: 1,
            data: img
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }),
        c => Err(Error::UnsupportedFormat(format!(
            "grayscale conversion expects 1 or 3 channels, got {c}"
        ))),
    }
}

/// Edge-clamped bilinear resampling with pixel-center alignment:
/// `src = (dst + 0.5) * (in / out) - 0.5`, clamped to `[0, in - 1]`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "resize target must be non-zero, got {out_h}x{out_w}"
        )));
    }
    if img.is_empty() {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let rows = sample_positions(img.height, out_h);
    let cols = sample_positions(img.width, out_w);
    let ch = img.channels;
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for c in 0..ch {
                let top = lerp(img.get(y0, x0, c), img.get(y0, x1, c), fx);
                let bottom = lerp(img.get(y1, x0, c), img.get(y1, x1, c), fx);
                data.push(lerp(top, bottom, fy));
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        channels: ch,
        data,
    })
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// For each output index: lower source index, upper source index, and the
/// weight of the upper one.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Maps 8-bit intensities onto `[0, 1]`.
pub fn normalize(img: &Image) -> Image {
    img.map(|v| v / 255.0)
}

/// Repeats a single-channel image across `channels` channels.
pub fn replicate_channels(img: &Image, channels: usize) -> Result<Image> {
    if img.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "channel replication expects 1 channel, got {}",
            img.channels
        )));
    }
    Ok(Image {
        height: img.height,
        width: img.width,
        channels,
        data: img
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(channels))
            .collect(),
    })
}
