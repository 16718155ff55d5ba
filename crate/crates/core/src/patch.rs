//! Splitting images into flattened patch vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// How an image is resized before it is cut into patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizePolicy {
    /// Square `S x S` (low-resolution pretraining).
    Fixed(usize),
    /// Each side rounded to the nearest multiple of the patch size, at least
    /// one patch (any-resolution stages).
    NativeMultiple,
}

impl ResizePolicy {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if patch_size == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if let ResizePolicy::Fixed(s) = *self {
            if s == 0 || s % patch_size != 0 {
                return Err(Error::config(format!(
                    "fixed resolution {s} is not a positive multiple of patch size {patch_size}"
                )));
            }
        }
        Ok(())
    }

    /// Target `(height, width)` for an image of the given size.
    pub fn target_size(&self, height: usize, width: usize, patch_size: usize) -> (usize, usize) {
        match *self {
            ResizePolicy::Fixed(s) => (s, s),
            ResizePolicy::NativeMultiple => (
                nearest_multiple(height, patch_size),
                nearest_multiple(width, patch_size),
            ),
        }
    }
}

fn nearest_multiple(n: usize, p: usize) -> usize {
    ((n + p / 2) / p).max(1) * p
}

/// `rows x cols` patches of `patch_size^2 * channels` values each, row-major
/// over the grid, channel-last within a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn from_vectors(
        rows: usize,
        cols: usize,
        patch_size: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != rows * cols * patch_size * patch_size * channels {
            return Err(Error::shape("patch data does not match grid dimensions"));
        }
        Ok(Self {
            rows,
            cols,
            patch_size,
            channels,
            data,
        })
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch at grid position `(r, c)`.
    pub fn patch(&self, r: usize, c: usize) -> &[f32] {
        let d = self.patch_dim();
        let i = r * self.cols + c;
        &self.data[i * d..(i + 1) * d]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.data
    }

    /// Reassemble the (resized) raster from the patches.
    pub fn to_image(&self) -> Image {
        let (p, ch) = (self.patch_size, self.channels);
        let mut img = Image::filled(self.rows * p, self.cols * p, ch, 0.0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let patch = self.patch(r, c);
                for y in 0..p {
                    for x in 0..p {
                        let src = &patch[(y * p + x) * ch..(y * p + x + 1) * ch];
                        img.pixel_mut(r * p + y, c * p + x).copy_from_slice(src);
                    }
                }
            }
        }
        img
    }
}

/// Resize according to `policy` and cut into `patch_size` squares.
pub fn patchify(image: &Image, patch_size: usize, policy: ResizePolicy) -> Result<PatchGrid> {
    policy.validate(patch_size)?;
    let (h, w) = policy.target_size(image.height, image.width, patch_size);
    let img = image.resize_nearest(h, w);
    let (rows, cols, p, ch) = (h / patch_size, w / patch_size, patch_size, img.channels);
    let mut data = Vec::with_capacity(h * w * ch);
    for r in 0..rows {
        for c in 0..cols {
            for y in 0..p {
                let start = ((r * p + y) * w + c * p) * ch;
                data.extend_from_slice(&img.data[start..start + p * ch]);
            }
        }
    }
    PatchGrid::from_vectors(rows, cols, p, ch, data)
}
