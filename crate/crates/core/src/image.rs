//! Raster images and binary PPM (P6) / PGM (P5) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Channel-last raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::config(format!(
                "image must be at least 1x1 with 1 or 3 channels, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Nearest-neighbour resize: destination pixel `(y, x)` samples source
    /// `(floor(y * H / h), floor(x * W / w))`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                let sx = x * self.width / width;
                data.extend_from_slice(self.pixel(sy, sx));
            }
        }
        Image {
            height,
            width,
            channels: self.channels,
            data,
        }
    }

    /// Encode as binary PPM (3 channels) or PGM (1 channel), maxval 255.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm_bytes())?;
        Ok(())
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> std::result::Result<Image, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let channels = match fields[0].as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(format!("unsupported format {other}")),
        };
        let parse = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| format!("bad {what} field `{s}`"))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        let maxval = parse(&fields[3], "maxval")?;
        if maxval != 255 {
            return Err(format!("maxval {maxval} unsupported (need 255)"));
        }
        let n = width * height * channels;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| format!("raster has {} bytes, need {n}", bytes.len().saturating_sub(pos)))?;
        let data = raster.iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(height, width, channels, data).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::ImageLoad {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Image::from_pnm_bytes(&bytes).map_err(|message| Error::ImageLoad {
            path: path.to_path_buf(),
            message,
        })
    }
}
