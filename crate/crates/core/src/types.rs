//! Domain values shared by every stage of the pipeline.
//!
//! All types are immutable once constructed and validate their invariants in
//! their constructors.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Encoder downsampling ratio: one embedding cell per `K`×`K` pixels.
pub const K: usize = 8;

/// RGB raster with values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Argument(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * Self::CHANNELS
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Argument(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image by clamping arbitrary finite values into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        Self::new(height, width, data)
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * Self::CHANNELS + channel]
    }

    /// Rec. 601 luma, one value per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// One channel as a plane of `f64`.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| p[channel] as f64)
            .collect()
    }
}

/// Ground-truth forgery mask: 1 = manipulated, 0 = authentic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Argument(format!("binary mask value {v} not in {{0, 1}}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Per-pixel source labels `0..r`, every label present at least once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourcePartition {
    height: usize,
    width: usize,
    data: Vec<u8>,
    sources: usize,
}

impl SourcePartition {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        let max = *data.iter().max().expect("non-empty") as usize;
        let mut seen = vec![false; max + 1];
        for &v in &data {
            seen[v as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Argument(format!(
                "partition labels must be contiguous from 0; label {missing} is absent (max {max})"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
            sources: max + 1,
        })
    }

    /// Relabels arbitrary labels to `0..r` preserving their relative order.
    pub fn compacted(height: usize, width: usize, labels: &[u32]) -> Result<Self> {
        check_dims(height, width, labels.len())?;
        let mut present: Vec<u32> = labels.to_vec();
        present.sort_unstable();
        present.dedup();
        if present.len() > 255 {
            return Err(Error::Argument(format!(
                "{} distinct labels exceed the 255-source limit",
                present.len()
            )));
        }
        let data = labels
            .iter()
            .map(|l| present.binary_search(l).expect("present") as u8)
            .collect();
        Self::new(height, width, data)
    }

    pub fn uniform(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of sources `r`.
    pub fn sources(&self) -> usize {
        self.sources
    }

    /// Pixel count per label.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.sources];
        for &v in &self.data {
            areas[v as usize] += 1;
        }
        areas
    }
}

/// Pixel coordinate of a point prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
}

impl PointPrompt {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::Argument(format!(
                "point ({}, {}) outside {height}x{width}",
                self.row, self.col
            )));
        }
        Ok(())
    }
}

/// Per-prompt target with labels 1 (prompt's region), 0 (neighbors), -1 (ignored).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointMask {
    height: usize,
    width: usize,
    data: Vec<i8>,
}

impl PointMask {
    pub const IGNORE: i8 = -1;

    pub fn new(height: usize, width: usize, data: Vec<i8>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(v) = data.iter().find(|&&v| !(-1..=1).contains(&v)) {
            return Err(Error::Argument(format!("point mask value {v} not in {{-1, 0, 1}}")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0).count()
    }
}

/// `V`-dimensional embedding per encoder cell, stored cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid {
    dim: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingGrid {
    pub fn new(dim: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || rows == 0 || cols == 0 {
            return Err(Error::Argument("embedding grid dimensions must be positive".into()));
        }
        if data.len() != dim * rows * cols {
            return Err(Error::Argument(format!(
                "embedding buffer has {} values, expected {}",
                data.len(),
                dim * rows * cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding value".into()));
        }
        Ok(Self {
            dim,
            rows,
            cols,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.cell(row * self.cols + col)
    }
}

/// Full-resolution logit map for one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl PredictionMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logit in prediction map".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Pixels with a positive logit.
    pub fn positive_area(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Soft forgery map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Argument(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn complement(&self) -> Heatmap {
        Heatmap {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }
}

/// Predicted pixel accuracy of a prediction map.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ConfidenceScore(f64);

impl ConfidenceScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Argument(format!("confidence {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Master seed. Child seeds come from SplitMix64 mixing; streams are ChaCha8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    /// Deterministic child seed for `(self, stream)`.
    pub fn derive(self, stream: u64) -> Seed {
        Seed(splitmix64(splitmix64(self.0) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
    }

    /// Child seed keyed by a stage name and an index.
    pub fn derive_named(self, name: &str, index: u64) -> Seed {
        let tag = name
            .bytes()
            .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01B3));
        self.derive(tag).derive(index)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "dimensions must be positive, got {height}x{width}"
        )));
    }
    if len != height * width {
        return Err(Error::Argument(format!(
            "buffer has {len} values, expected {}",
            height * width
        )));
    }
    Ok(())
}
