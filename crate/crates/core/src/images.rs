//! Pixel tensors and the sources that bind image ids to them.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::hash_str;

/// `resolution x resolution x 3` grid of values in [0, 1], row-major as
/// (row, column, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub resolution: usize,
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(resolution: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != resolution * resolution * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "{} pixel values for a {resolution}x{resolution}x3 image",
                pixels.len()
            )));
        }
        Ok(Self { resolution, pixels })
    }

    pub fn zeros(resolution: usize) -> Self {
        Self {
            resolution,
            pixels: vec![0.0; resolution * resolution * Self::CHANNELS],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.pixels[(row * self.resolution + col) * Self::CHANNELS + ch]
    }
}

/// Anything that can produce pixels for an image id.
pub trait ImageSource: Sync {
    fn image(&self, image_id: &str, resolution: usize) -> Option<ImageTensor>;
}

impl ImageSource for HashMap<String, ImageTensor> {
    fn image(&self, image_id: &str, _resolution: usize) -> Option<ImageTensor> {
        self.get(image_id).cloned()
    }
}

/// Procedural images keyed by id. Ids of the form `c<k>-<rest>` share a
/// class-level pattern (frequencies and phases from `k`) plus per-image
/// noise; any other id gets a pattern from its own hash.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticImages;

impl SyntheticImages {
    pub fn class_of(image_id: &str) -> Option<u64> {
        let rest = image_id.strip_prefix('c')?;
        let (k, _) = rest.split_once('-')?;
        k.parse().ok()
    }

    pub fn render(image_id: &str, resolution: usize) -> ImageTensor {
        let pattern_key = match Self::class_of(image_id) {
            Some(k) => hash_str(&format!("class:{k}")),
            None => hash_str(image_id),
        };
        let unit = |h: u64, shift: u32| ((h >> shift) & 0xffff) as f64 / 65535.0;
        let fx = 0.5 + 2.5 * unit(pattern_key, 0);
        let fy = 0.5 + 2.5 * unit(pattern_key, 16);
        let phase = 6.283 * unit(pattern_key, 32);
        let tint = unit(pattern_key, 48);
        let mut noise = hash_str(image_id) | 1;
        let mut pixels = Vec::with_capacity(resolution * resolution * 3);
        let r = resolution as f64;
        for y in 0..resolution {
            for x in 0..resolution {
                for c in 0..3 {
                    noise ^= noise << 13;
                    noise ^= noise >> 7;
                    noise ^= noise << 17;
                    let eps = (noise >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
                    let wave = (6.283 * (fx * x as f64 + fy * y as f64) / r + phase + 2.1 * c as f64).sin();
                    let v = 0.5 + 0.3 * wave + 0.15 * (tint - 0.5) + 0.1 * eps;
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        ImageTensor { resolution, pixels }
    }
}

impl ImageSource for SyntheticImages {
    fn image(&self, image_id: &str, resolution: usize) -> Option<ImageTensor> {
        Some(Self::render(image_id, resolution))
    }
}
