//! Procedural multi-source images with pixel-exact source partitions, plus the
//! global post-processing used for augmentation and robustness sweeps.
//!
//! Each source is its own procedural texture degraded by a [`SourceSignature`]
//! (blur, color gain, sensor-like noise, value quantization). Source 0 is the
//! background; the others are irregular blobs spliced on top of it.

use crate::error::{Error, Result};
use crate::io;
use crate::types::{BinaryMask, Image, SourcePartition, Seed, K};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-source processing fingerprint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSignature {
    pub noise_sigma: f64,
    pub color_gain: [f64; 3],
    pub quant_step: f64,
    pub blur_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignatureConfig {
    pub noise_sigma: (f64, f64),
    pub color_gain: (f64, f64),
    pub quant_steps: Vec<f64>,
    pub blur_sigma: (f64, f64),
    /// Any two sources differ in at least one field by this fraction of the field's range.
    pub min_margin: f64,
    /// Any two sources differ in noise sigma by at least this much (absolute).
    pub noise_margin: f64,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        Self {
            noise_sigma: (0.0, 0.08),
            color_gain: (0.85, 1.15),
            quant_steps: vec![0.0, 1.0 / 64.0, 1.0 / 32.0],
            blur_sigma: (0.0, 1.2),
            min_margin: 0.25,
            noise_margin: 0.0,
        }
    }
}

impl SignatureConfig {
    /// Easy setting: noise levels pairwise at least 0.03 apart.
    pub fn strong() -> Self {
        Self {
            noise_margin: 0.03,
            ..Self::default()
        }
    }

    fn validate(&self, n_sources: usize) -> Result<()> {
        let span = self.noise_sigma.1 - self.noise_sigma.0;
        let ranges_ok = self.noise_sigma.0 >= 0.0
            && span >= 0.0
            && self.color_gain.0 > 0.0
            && self.color_gain.1 >= self.color_gain.0
            && self.blur_sigma.0 >= 0.0
            && self.blur_sigma.1 >= self.blur_sigma.0
            && !self.quant_steps.is_empty()
            && self.quant_steps.iter().all(|&q| q >= 0.0);
        if !ranges_ok {
            return Err(Error::Config("invalid signature ranges".into()));
        }
        if self.noise_margin * (n_sources.saturating_sub(1)) as f64 > span + 1e-12 {
            return Err(Error::Config(format!(
                "noise margin {} cannot separate {n_sources} sources within [{}, {}]",
                self.noise_margin, self.noise_sigma.0, self.noise_sigma.1
            )));
        }
        Ok(())
    }

    /// Largest per-field difference, each normalized by its range width.
    pub fn distinctiveness(&self, a: &SourceSignature, b: &SourceSignature) -> f64 {
        let norm = |d: f64, lo: f64, hi: f64| if hi > lo { d.abs() / (hi - lo) } else { 0.0 };
        let gain = (0..3)
            .map(|c| norm(a.color_gain[c] - b.color_gain[c], self.color_gain.0, self.color_gain.1))
            .fold(0.0, f64::max);
        let qmax = self.quant_steps.iter().cloned().fold(0.0, f64::max);
        let qmin = self.quant_steps.iter().cloned().fold(f64::INFINITY, f64::min);
        [
            norm(a.noise_sigma - b.noise_sigma, self.noise_sigma.0, self.noise_sigma.1),
            gain,
            norm(a.quant_step - b.quant_step, qmin, qmax),
            norm(a.blur_sigma - b.blur_sigma, self.blur_sigma.0, self.blur_sigma.1),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn sample(&self, rng: &mut ChaCha8Rng, n: usize, retries: usize) -> Result<Vec<SourceSignature>> {
        for _ in 0..retries.max(1) {
            let noise = self.sample_noise_levels(rng, n);
            let sigs: Vec<SourceSignature> = noise
                .into_iter()
                .map(|noise_sigma| SourceSignature {
                    noise_sigma,
                    color_gain: [0; 3].map(|_| uniform(rng, self.color_gain)),
                    quant_step: self.quant_steps[rng.random_range(0..self.quant_steps.len())],
                    blur_sigma: uniform(rng, self.blur_sigma),
                })
                .collect();
            let separated = (0..n).all(|i| {
                (i + 1..n).all(|j| self.distinctiveness(&sigs[i], &sigs[j]) >= self.min_margin)
            });
            if separated {
                return Ok(sigs);
            }
        }
        Err(Error::Generation(format!(
            "could not draw {n} signatures with margin {}",
            self.min_margin
        )))
    }

    /// Noise levels with pairwise spacing ≥ `noise_margin`: draw sorted offsets in
    /// the shrunken range, spread them by the margin, then shuffle.
    fn sample_noise_levels(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let (lo, hi) = self.noise_sigma;
        let slack = (hi - lo - self.noise_margin * n.saturating_sub(1) as f64).max(0.0);
        let mut offsets: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * slack).collect();
        offsets.sort_by(f64::total_cmp);
        let mut levels: Vec<f64> = offsets
            .iter()
            .enumerate()
            .map(|(i, o)| (lo + o + self.noise_margin * i as f64).min(hi))
            .collect();
        for i in (1..n).rev() {
            levels.swap(i, rng.random_range(0..=i));
        }
        levels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub signatures: SignatureConfig,
    /// Every source must cover at least this fraction of the image.
    pub min_region_fraction: f64,
    /// Upper bound on a single spliced region's target area fraction.
    pub max_region_fraction: f64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            signatures: SignatureConfig::default(),
            min_region_fraction: 0.02,
            max_region_fraction: 0.35,
            max_retries: 20,
        }
    }
}

impl SynthConfig {
    pub fn strong() -> Self {
        Self {
            signatures: SignatureConfig::strong(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub partition: SourcePartition,
    pub signatures: Vec<SourceSignature>,
}

/// [`generate_sample_with`] under the default configuration.
pub fn generate_sample(seed: Seed, size: usize, n_sources: usize) -> Result<(Image, SourcePartition)> {
    let s = generate_sample_with(&SynthConfig::default(), seed, size, n_sources)?;
    Ok((s.image, s.partition))
}

pub fn generate_sample_with(
    cfg: &SynthConfig,
    seed: Seed,
    size: usize,
    n_sources: usize,
) -> Result<Sample> {
    if !(1..=6).contains(&n_sources) {
        return Err(Error::Argument(format!("n_sources must be in [1, 6], got {n_sources}")));
    }
    if size == 0 || size % K != 0 {
        return Err(Error::Argument(format!("size {size} must be a positive multiple of {K}")));
    }
    cfg.signatures.validate(n_sources)?;
    let mut rng = seed.rng();
    let signatures = cfg.signatures.sample(&mut rng, n_sources, cfg.max_retries * 50)?;
    let labels = sample_regions(cfg, &mut rng, size, n_sources)?;

    let mut data = vec![0f32; size * size * 3];
    for (k, sig) in signatures.iter().enumerate() {
        let tex = apply_signature(&procedural_texture(&mut rng, size), size, sig, &mut rng);
        for (p, &l) in labels.iter().enumerate() {
            if l as usize == k {
                data[p * 3..p * 3 + 3].copy_from_slice(&tex[p * 3..p * 3 + 3]);
            }
        }
    }
    Ok(Sample {
        image: Image::new(size, size, data)?,
        partition: SourcePartition::new(size, size, labels)?,
        signatures,
    })
}

fn sample_regions(cfg: &SynthConfig, rng: &mut ChaCha8Rng, size: usize, n: usize) -> Result<Vec<u8>> {
    let npx = size * size;
    if n == 1 {
        return Ok(vec![0; npx]);
    }
    let min_px = (cfg.min_region_fraction * npx as f64).ceil() as usize;
    let upper = cfg.max_region_fraction.min(0.7 / (n - 1) as f64);
    let lower = (2.5 * cfg.min_region_fraction).min(upper);
    for _ in 0..cfg.max_retries.max(1) {
        let mut labels = vec![0u8; npx];
        for k in 1..n {
            let frac = lower + rng.random::<f64>() * (upper - lower);
            let blob = blob_mask(rng, size, frac);
            for (l, b) in labels.iter_mut().zip(blob) {
                if b {
                    *l = k as u8;
                }
            }
        }
        let mut areas = vec![0usize; n];
        for &l in &labels {
            areas[l as usize] += 1;
        }
        if areas.iter().all(|&a| a >= min_px) {
            return Ok(labels);
        }
    }
    Err(Error::Generation(format!(
        "could not place {n} sources each covering {:.1}% of a {size}x{size} image after {} attempts",
        cfg.min_region_fraction * 100.0,
        cfg.max_retries
    )))
}

/// Irregular blob covering `frac` of the image: smooth noise minus a radial falloff,
/// thresholded at the matching quantile.
fn blob_mask(rng: &mut ChaCha8Rng, size: usize, frac: f64) -> Vec<bool> {
    let field = fractal_noise(rng, size, size, &[size / 4, size / 8, size / 16]);
    let cy = (0.2 + 0.6 * rng.random::<f64>()) * size as f64;
    let cx = (0.2 + 0.6 * rng.random::<f64>()) * size as f64;
    let radius = size as f64 * (frac / std::f64::consts::PI).sqrt();
    let wobble = 0.6 + 0.6 * rng.random::<f64>();
    let score: Vec<f64> = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64 + 0.5, (p % size) as f64 + 0.5);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / radius;
            wobble * field[p] - d
        })
        .collect();
    let keep = ((frac * (size * size) as f64).round() as usize).clamp(1, size * size);
    let mut sorted = score.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[keep - 1];
    score.into_iter().map(|s| s >= threshold).collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Lattice value noise with smoothstep interpolation, values in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let cell = cell.max(1);
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx as usize, smooth(fx.fract()));
            let at = |r: usize, c: usize| lattice[r * gw + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Octaves at the given cell sizes with halving amplitude, normalized to `[0, 1]` range weights.
fn fractal_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut total = 0.0;
    for &cell in cells {
        let layer = value_noise(rng, h, w, cell);
        for (o, v) in out.iter_mut().zip(layer) {
            *o += amp * v;
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Natural-looking RGB texture: shared luminance octaves, per-channel tint
/// octaves and a linear gradient.
fn procedural_texture(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let octaves: Vec<usize> = [64, 32, 16, 8, 4]
        .iter()
        .map(|&c| (c * size / 256).max(2))
        .collect();
    let lum = fractal_noise(rng, size, size, &octaves);
    let lum_amp = 0.5 + 0.4 * rng.random::<f64>();
    let theta = rng.random::<f64>() * std::f64::consts::TAU;
    let slope = 0.3 * (rng.random::<f64>() - 0.5);
    let mut out = vec![0.0; size * size * 3];
    for c in 0..3 {
        let base = 0.25 + 0.5 * rng.random::<f64>();
        let tint = fractal_noise(rng, size, size, &octaves[..3]);
        let tint_amp = 0.2 * rng.random::<f64>();
        for p in 0..size * size {
            let (y, x) = ((p / size) as f64 / size as f64, (p % size) as f64 / size as f64);
            let grad = slope * (x * theta.cos() + y * theta.sin() - 0.5);
            let v = base + lum_amp * (lum[p] - 0.5) + tint_amp * (tint[p] - 0.5) + grad;
            out[p * 3 + c] = v.clamp(0.0, 1.0);
        }
    }
    out
}

fn apply_signature(tex: &[f64], size: usize, sig: &SourceSignature, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let blurred = gaussian_blur_rgb(tex, size, size, sig.blur_sigma);
    let noise = Normal::new(0.0, sig.noise_sigma.max(0.0)).expect("valid sigma");
    blurred
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut v = v * sig.color_gain[i % 3];
            if sig.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            if sig.quant_step > 0.0 {
                v = (v / sig.quant_step).round() * sig.quant_step;
            }
            v.clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Separable Gaussian blur over an interleaved RGB buffer with mirrored borders.
fn gaussian_blur_rgb(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = mirror(x as isize + k as isize - radius, w);
                    acc += kv * data[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = mirror(y as isize + k as isize - radius, h);
                    acc += kv * tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

/// Authentic source (label 0) → 0, every other source → 1.
pub fn partition_to_binary(p: &SourcePartition) -> BinaryMask {
    let data = p.data().iter().map(|&l| u8::from(l != 0)).collect();
    BinaryMask::new(p.height(), p.width(), data).expect("same dims")
}

/// One global post-processing operation at a fixed parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Blur { sigma: f64 },
    Noise { sigma: f64 },
    Contrast { factor: f64 },
    Gamma { gamma: f64 },
    /// Quality ≥ 100 is treated as the identity.
    Jpeg { quality: u8 },
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        match *self {
            Transform::Blur { sigma } | Transform::Noise { sigma } => sigma <= 0.0,
            Transform::Contrast { factor } => factor == 1.0,
            Transform::Gamma { gamma } => gamma == 1.0,
            Transform::Jpeg { quality } => quality >= 100,
        }
    }
}

/// Applies `t`; the seed only matters for noise.
pub fn apply_transform(img: &Image, t: Transform, seed: Seed) -> Result<Image> {
    if t.is_identity() {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let data: Vec<f32> = match t {
        Transform::Blur { sigma } => {
            let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
            gaussian_blur_rgb(&src, h, w, sigma)
                .into_iter()
                .map(|v| v as f32)
                .collect()
        }
        Transform::Noise { sigma } => {
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::Argument(format!("noise sigma {sigma}: {e}")))?;
            let mut rng = seed.rng();
            img.data()
                .iter()
                .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
                .collect()
        }
        Transform::Contrast { factor } => img
            .data()
            .iter()
            .map(|&v| (0.5 + (v as f64 - 0.5) * factor) as f32)
            .collect(),
        Transform::Gamma { gamma } => {
            if gamma <= 0.0 {
                return Err(Error::Argument(format!("gamma must be positive, got {gamma}")));
            }
            img.data().iter().map(|&v| (v as f64).powf(gamma) as f32).collect()
        }
        Transform::Jpeg { quality } => return jpeg_round_trip(img, quality.max(1)),
    };
    Image::from_clamped(h, w, data)
}

fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    use image::ImageEncoder;
    let bytes: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality)
        .write_image(&bytes, img.width() as u32, img.height() as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Format(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Format(format!("jpeg decode: {e}")))?
        .to_rgb8();
    let data = decoded.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(img.height(), img.width(), data)
}

/// Probabilistic global augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostProcessConfig {
    pub p_blur: f64,
    pub p_noise: f64,
    pub p_contrast: f64,
    pub p_gamma: f64,
    pub p_jpeg: f64,
    pub blur_sigma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
    pub jpeg_quality: (u8, u8),
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        Self {
            p_blur: 0.3,
            p_noise: 0.3,
            p_contrast: 0.3,
            p_gamma: 0.3,
            p_jpeg: 0.3,
            blur_sigma: (0.3, 1.0),
            noise_sigma: (0.003, 0.02),
            contrast: (0.8, 1.2),
            gamma: (0.8, 1.25),
            jpeg_quality: (75, 95),
        }
    }
}

impl PostProcessConfig {
    pub fn disabled() -> Self {
        Self {
            p_blur: 0.0,
            p_noise: 0.0,
            p_contrast: 0.0,
            p_gamma: 0.0,
            p_jpeg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_blur, self.p_noise, self.p_contrast, self.p_gamma, self.p_jpeg];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("transform probabilities must be in [0, 1]: {probs:?}")));
        }
        let ordered = |(a, b): (f64, f64)| a <= b;
        if !(ordered(self.blur_sigma)
            && ordered(self.noise_sigma)
            && ordered(self.contrast)
            && ordered(self.gamma)
            && self.jpeg_quality.0 <= self.jpeg_quality.1
            && self.gamma.0 > 0.0
            && self.blur_sigma.0 >= 0.0
            && self.noise_sigma.0 >= 0.0)
        {
            return Err(Error::Config("invalid post-processing parameter ranges".into()));
        }
        Ok(())
    }
}

/// Applies blur, contrast, gamma, noise and JPEG in that order, each with its
/// own probability. Output is clamped to `[0, 1]`.
pub fn postprocess(img: &Image, cfg: &PostProcessConfig, seed: Seed) -> Result<Image> {
    cfg.validate()?;
    let mut rng = seed.rng();
    let mut out = img.clone();
    let steps: [(f64, &dyn Fn(&mut ChaCha8Rng) -> Transform); 5] = [
        (cfg.p_blur, &|r| Transform::Blur { sigma: uniform(r, cfg.blur_sigma) }),
        (cfg.p_contrast, &|r| Transform::Contrast { factor: uniform(r, cfg.contrast) }),
        (cfg.p_gamma, &|r| Transform::Gamma { gamma: uniform(r, cfg.gamma) }),
        (cfg.p_noise, &|r| Transform::Noise { sigma: uniform(r, cfg.noise_sigma) }),
        (cfg.p_jpeg, &|r| Transform::Jpeg {
            quality: r.random_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1),
        }),
    ];
    for (i, (p, draw)) in steps.iter().enumerate() {
        let fire = rng.random::<f64>() < *p;
        let t = draw(&mut rng);
        if fire {
            out = apply_transform(&out, t, seed.derive(i as u64 + 1))?;
        }
    }
    Ok(out)
}

/// Number of sources per generated sample, drawn uniformly in `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRange {
    pub min: usize,
    pub max: usize,
}

impl SourceRange {
    pub fn fixed(n: usize) -> Self {
        Self { min: n, max: n }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub n_sources: usize,
    pub signatures: Vec<SourceSignature>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub size: usize,
    pub config: SynthConfig,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `images/`, `partitions/`, `binary/` (five-digit names) and `manifest.json`.
/// Sample `i` uses seed `derive(master, i)`, so any subset can be regenerated.
pub fn generate_dataset(
    dir: &Path,
    cfg: &SynthConfig,
    master_seed: Seed,
    count: usize,
    size: usize,
    sources: SourceRange,
) -> Result<Manifest> {
    if sources.min == 0 || sources.min > sources.max {
        return Err(Error::Config(format!("invalid source range {sources:?}")));
    }
    for sub in ["images", "partitions", "binary"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let samples = (0..count)
        .into_par_iter()
        .map(|index| {
            let seed = master_seed.derive(index as u64);
            let n = sources.min + (seed.derive(0x5eed).0 % (sources.max - sources.min + 1) as u64) as usize;
            let s = generate_sample_with(cfg, seed, size, n)?;
            let name = format!("{index:05}.png");
            io::write_image_png(&s.image, &dir.join("images").join(&name))?;
            io::write_partition_png(&s.partition, &dir.join("partitions").join(&name))?;
            io::write_binary_mask_png(&partition_to_binary(&s.partition), &dir.join("binary").join(&name))?;
            Ok(ManifestEntry {
                index,
                seed: seed.0,
                n_sources: n,
                signatures: s.signatures,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        master_seed: master_seed.0,
        size,
        config: cfg.clone(),
        samples,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    io::write_all(&path, &json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_source_is_uniform() {
        let (img, p) = generate_sample(Seed(1), 64, 1).unwrap();
        assert_eq!(p.sources(), 1);
        assert!(p.data().iter().all(|&l| l == 0));
        assert_eq!(img.height(), 64);
    }

    #[test]
    fn three_sources_each_cover_two_percent() {
        let (_, p) = generate_sample(Seed(7), 256, 3).unwrap();
        assert_eq!(p.sources(), 3);
        let npx = 256 * 256;
        for a in p.areas() {
            assert!(a as f64 >= 0.02 * npx as f64, "area {a}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sample(Seed(5), 64, 4).unwrap();
        let b = generate_sample(Seed(5), 64, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(Seed(6), 64, 4).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn invalid_requests_rejected() {
        assert!(generate_sample(Seed(0), 64, 0).is_err());
        assert!(generate_sample(Seed(0), 64, 7).is_err());
        assert!(generate_sample(Seed(0), 60, 2).is_err());
    }

    #[test]
    fn unsatisfiable_area_is_generation_error() {
        let cfg = SynthConfig {
            min_region_fraction: 0.4,
            max_retries: 3,
            ..SynthConfig::default()
        };
        let err = generate_sample_with(&cfg, Seed(0), 64, 4).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn strong_signatures_separate_noise_levels() {
        let cfg = SynthConfig::strong();
        for s in 0..20 {
            let sample = generate_sample_with(&cfg, Seed(s), 64, 3).unwrap();
            let sig = &sample.signatures;
            for i in 0..3 {
                for j in i + 1..3 {
                    assert!((sig[i].noise_sigma - sig[j].noise_sigma).abs() >= 0.03 - 1e-12);
                    assert!(cfg.signatures.distinctiveness(&sig[i], &sig[j]) >= cfg.signatures.min_margin);
                }
            }
        }
    }

    #[test]
    fn binary_conversion() {
        let p = SourcePartition::new(1, 4, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(partition_to_binary(&p).data(), &[0, 1, 1, 0]);
        let two = SourcePartition::new(1, 3, vec![1, 0, 1]).unwrap();
        assert_eq!(partition_to_binary(&two).data(), two.data());
        let zero = SourcePartition::uniform(2, 2).unwrap();
        assert!(partition_to_binary(&zero).data().iter().all(|&v| v == 0));
    }

    #[test]
    fn disabled_postprocess_is_identity() {
        let (img, _) = generate_sample(Seed(2), 32, 2).unwrap();
        let out = postprocess(&img, &PostProcessConfig::disabled(), Seed(9)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn neutral_parameters_are_identity() {
        let (img, _) = generate_sample(Seed(2), 32, 2).unwrap();
        for t in [
            Transform::Gamma { gamma: 1.0 },
            Transform::Contrast { factor: 1.0 },
            Transform::Blur { sigma: 0.0 },
            Transform::Noise { sigma: 0.0 },
            Transform::Jpeg { quality: 100 },
        ] {
            assert_eq!(apply_transform(&img, t, Seed(1)).unwrap(), img, "{t:?}");
        }
    }

    #[test]
    fn noise_std_matches_sigma() {
        let img = Image::constant(128, 128, [0.5; 3]).unwrap();
        let out = apply_transform(&img, Transform::Noise { sigma: 0.05 }, Seed(4)).unwrap();
        let n = out.data().len() as f64;
        let mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - 0.05).abs() < 0.005, "std {std}");
    }

    #[test]
    fn jpeg_changes_pixels_but_keeps_shape() {
        let (img, _) = generate_sample(Seed(2), 32, 2).unwrap();
        let out = apply_transform(&img, Transform::Jpeg { quality: 50 }, Seed(0)).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert_ne!(out, img);
    }

    #[test]
    fn postprocess_rejects_bad_probability() {
        let img = Image::constant(8, 8, [0.5; 3]).unwrap();
        let cfg = PostProcessConfig {
            p_blur: 1.5,
            ..PostProcessConfig::default()
        };
        assert!(postprocess(&img, &cfg, Seed(0)).is_err());
    }

    #[test]
    fn dataset_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), &SynthConfig::strong(), Seed(11), 3, 32, SourceRange::fixed(2)).unwrap();
        assert_eq!(m.samples.len(), 3);
        for i in 0..3 {
            let name = format!("{i:05}.png");
            let p = io::read_partition_png(&dir.path().join("partitions").join(&name)).unwrap();
            let b = io::read_binary_mask_png(&dir.path().join("binary").join(&name)).unwrap();
            assert_eq!(partition_to_binary(&p), b);
            assert_eq!(m.samples[i].seed, Seed(11).derive(i as u64).0);
        }
        assert!(dir.path().join("manifest.json").exists());
    }
}
