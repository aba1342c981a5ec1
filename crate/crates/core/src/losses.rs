//! Training objectives: region-to-region InfoNCE, area-adaptive BCE,
//! confidence regression, and the label plumbing they need.

use crate::error::{Error, Result};
use crate::types::{BinaryMask, ConfidenceScore, EmbeddingGrid, PointMask, PredictionMap, SourcePartition};
use crate::net::sigmoid;
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-12;

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub c_max: f64,
    pub lambda_conf: f64,
    /// L2-normalize cell embeddings before contrastive dot products.
    pub normalize_embeddings: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            c_max: 10.0,
            lambda_conf: 0.1,
            normalize_embeddings: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.c_max >= 1.0) {
            return Err(Error::Config(format!("c_max must be at least 1, got {}", self.c_max)));
        }
        if !(self.lambda_conf >= 0.0) {
            return Err(Error::Config(format!("lambda_conf must be non-negative, got {}", self.lambda_conf)));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log(exp(q·p/τ) / (exp(q·p/τ) + Σ exp(q·n/τ)))`.
pub fn info_nce(q: &[f64], p: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Argument("info_nce needs at least one negative".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let pos = dot(q, p) / tau;
    let lse = log_sum_exp(std::iter::once(pos).chain(negatives.iter().map(|n| dot(q, n) / tau)));
    Ok(lse - pos)
}

/// Embedding grid plus one source label per cell.
#[derive(Clone, Copy, Debug)]
pub struct R2RBatch<'a> {
    pub grid: &'a EmbeddingGrid,
    pub labels: &'a [u8],
    pub tau: f64,
    pub normalize: bool,
}

fn unit_rows(data: &[f64], dim: usize, normalize: bool) -> Vec<f64> {
    if !normalize {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(data.len());
    for e in data.chunks_exact(dim) {
        let n = (dot(e, e) + NORM_EPS).sqrt();
        out.extend(e.iter().map(|v| v / n));
    }
    out
}

fn check_labels(cells: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != cells {
        return Err(Error::ShapeMismatch {
            left: format!("{cells} cells"),
            right: format!("{} labels", labels.len()),
        });
    }
    Ok(())
}

/// Mean over anchor cells of InfoNCE against the mean of the anchor's other
/// region cells and every cell of other regions. `None` when fewer than two
/// regions are present or no region has two cells.
pub fn r2r_loss(batch: &R2RBatch) -> Result<Option<f64>> {
    let grid = batch.grid;
    check_labels(grid.cells(), batch.labels)?;
    let dim = grid.dim();
    let z = unit_rows(grid.data(), dim, batch.normalize);
    let cell = |i: usize| &z[i * dim..(i + 1) * dim];
    let mut total = 0.0;
    let mut anchors = 0usize;
    for a in 0..grid.cells() {
        let region = batch.labels[a];
        let same: Vec<usize> = (0..grid.cells()).filter(|&c| c != a && batch.labels[c] == region).collect();
        let negatives: Vec<&[f64]> = (0..grid.cells())
            .filter(|&c| batch.labels[c] != region)
            .map(cell)
            .collect();
        if same.is_empty() || negatives.is_empty() {
            continue;
        }
        let mut p = vec![0.0; dim];
        for &c in &same {
            for (pv, v) in p.iter_mut().zip(cell(c)) {
                *pv += v;
            }
        }
        p.iter_mut().for_each(|v| *v /= same.len() as f64);
        total += info_nce(cell(a), &p, &negatives, batch.tau)?;
        anchors += 1;
    }
    Ok((anchors > 0).then(|| total / anchors as f64))
}

/// [`r2r_loss`] with its gradient w.r.t. the raw cell embeddings (cell-major).
pub(crate) fn r2r_loss_grad(
    embeddings: &[f64],
    dim: usize,
    labels: &[u8],
    tau: f64,
    normalize: bool,
) -> Option<(f64, Vec<f64>)> {
    let n = labels.len();
    let z = unit_rows(embeddings, dim, normalize);
    let mut sizes = [0usize; 256];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    let anchors = labels.iter().filter(|&&l| sizes[l as usize] >= 2 && sizes[l as usize] < n).count();
    if anchors == 0 {
        return None;
    }
    let scale = 1.0 / anchors as f64;
    // Dimension-major copy: every inner loop below is a contiguous axpy over cells.
    let mut zt = vec![0.0; z.len()];
    for (c, zc) in z.chunks_exact(dim).enumerate() {
        for (d, &v) in zc.iter().enumerate() {
            zt[d * n + c] = v;
        }
    }
    // coef[a][c] = dL/d(z_a·z_c) from anchor a's term.
    let mut coef = vec![0.0; n * n];
    let mut total = 0.0;
    for a in 0..n {
        let region = labels[a];
        let size = sizes[region as usize];
        if size < 2 || size == n {
            continue;
        }
        let row = &mut coef[a * n..(a + 1) * n];
        for (d, &v) in z[a * dim..(a + 1) * dim].iter().enumerate() {
            let v = v / tau;
            for (r, &t) in row.iter_mut().zip(&zt[d * n..(d + 1) * n]) {
                *r += v * t;
            }
        }
        let mut pos = 0.0;
        let mut max = f64::NEG_INFINITY;
        for (&l, &r) in labels.iter().zip(row.iter()) {
            if l == region {
                pos += r;
            } else {
                max = max.max(r);
            }
        }
        // The anchor's self-similarity was summed above.
        pos = (pos - row[a]) / (size - 1) as f64;
        max = max.max(pos);
        let mut sum = (pos - max).exp();
        for (&l, r) in labels.iter().zip(row.iter_mut()) {
            if l != region {
                *r = (*r - max).exp();
                sum += *r;
            }
        }
        let lse = max + sum.ln();
        total += lse - pos;
        // Same-region cells see the loss through the positive, the rest
        // through the softmax denominator.
        let pi_pos = (pos - lse).exp();
        let same_coef = scale * (pi_pos - 1.0) / (tau * (size - 1) as f64);
        let neg_scale = scale / (sum * tau);
        for (&l, r) in labels.iter().zip(row.iter_mut()) {
            *r = if l == region { same_coef } else { *r * neg_scale };
        }
        row[a] = 0.0;
    }
    // Symmetrize in place (tiled so the transposed reads stay in cache).
    const TILE: usize = 32;
    for bi in (0..n).step_by(TILE) {
        for bj in (bi..n).step_by(TILE) {
            for i in bi..(bi + TILE).min(n) {
                for j in bj.max(i)..(bj + TILE).min(n) {
                    let s = coef[i * n + j] + coef[j * n + i];
                    coef[i * n + j] = s;
                    coef[j * n + i] = s;
                }
            }
        }
    }
    // dZ = (C + Cᵀ) Z, accumulated dimension-major.
    let mut dzt = vec![0.0; z.len()];
    for a in 0..n {
        let row = &coef[a * n..(a + 1) * n];
        for d in 0..dim {
            let za = z[a * dim + d];
            for (g, &s) in dzt[d * n..(d + 1) * n].iter_mut().zip(row) {
                *g += s * za;
            }
        }
    }
    let mut dz = vec![0.0; z.len()];
    for (c, g) in dz.chunks_exact_mut(dim).enumerate() {
        for (d, v) in g.iter_mut().enumerate() {
            *v = dzt[d * n + c];
        }
    }
    let loss = total * scale;
    if !normalize {
        return Some((loss, dz));
    }
    let mut de = vec![0.0; z.len()];
    for ((e, g), out) in embeddings
        .chunks_exact(dim)
        .zip(dz.chunks_exact(dim))
        .zip(de.chunks_exact_mut(dim))
    {
        let norm = (dot(e, e) + NORM_EPS).sqrt();
        let proj = dot(e, g) / (norm * norm * norm);
        for ((o, &gv), &ev) in out.iter_mut().zip(g).zip(e) {
            *o = gv / norm - ev * proj;
        }
    }
    Some((loss, de))
}

/// 1 where the logit is strictly positive.
pub fn bin(x: &PredictionMap) -> BinaryMask {
    let data = x.data().iter().map(|&v| u8::from(v > 0.0)).collect();
    BinaryMask::new(x.height(), x.width(), data).expect("dimensions come from a valid map")
}

fn check_shapes(x: &PredictionMap, yp: &PointMask) -> Result<()> {
    if (x.height(), x.width()) != (yp.height(), yp.width()) {
        return Err(Error::ShapeMismatch {
            left: format!("prediction {}x{}", x.height(), x.width()),
            right: format!("point mask {}x{}", yp.height(), yp.width()),
        });
    }
    Ok(())
}

/// Class weights `(w1, w0)`; an absent class gets weight 0.
pub fn aass_weights(yp: &PointMask, c_max: f64) -> Result<(f64, f64)> {
    weights_from_labels(yp.data(), c_max)
}

fn weights_from_labels(labels: &[i8], c_max: f64) -> Result<(f64, f64)> {
    let ones = labels.iter().filter(|&&v| v == 1).count();
    let zeros = labels.iter().filter(|&&v| v == 0).count();
    let valid = ones + zeros;
    if valid == 0 {
        return Err(Error::Argument("point mask has no valid pixels".into()));
    }
    let w = |count: usize| {
        if count == 0 {
            0.0
        } else {
            (valid as f64 / count as f64).min(c_max)
        }
    };
    Ok((w(ones), w(zeros)))
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Area-adaptive weighted BCE averaged over non-ignored pixels.
pub fn aass_loss(x: &PredictionMap, yp: &PointMask, c_max: f64) -> Result<f64> {
    check_shapes(x, yp)?;
    let logits: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    Ok(aass_loss_grad(&logits, yp.data(), c_max)?.0)
}

pub(crate) fn aass_loss_grad(logits: &[f64], labels: &[i8], c_max: f64) -> Result<(f64, Vec<f64>)> {
    let (w1, w0) = weights_from_labels(labels, c_max)?;
    let valid = labels.iter().filter(|&&v| v >= 0).count() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((&x, &y), g) in logits.iter().zip(labels).zip(grad.iter_mut()) {
        match y {
            1 => {
                loss += w1 * softplus(-x);
                *g = w1 * (sigmoid(x) - 1.0) / valid;
            }
            0 => {
                loss += w0 * softplus(x);
                *g = w0 * sigmoid(x) / valid;
            }
            _ => {}
        }
    }
    Ok((loss / valid, grad))
}

/// Fraction of valid pixels where `bin(x)` agrees with the label.
pub fn pixel_accuracy(x: &PredictionMap, yp: &PointMask) -> Result<f64> {
    check_shapes(x, yp)?;
    let logits: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    accuracy_from_logits(&logits, yp.data())
}

pub(crate) fn accuracy_from_logits(logits: &[f64], labels: &[i8]) -> Result<f64> {
    let mut valid = 0usize;
    let mut hits = 0usize;
    for (&x, &y) in logits.iter().zip(labels) {
        if y >= 0 {
            valid += 1;
            hits += usize::from((x > 0.0) == (y == 1));
        }
    }
    if valid == 0 {
        return Err(Error::Argument("point mask has no valid pixels".into()));
    }
    Ok(hits as f64 / valid as f64)
}

/// `(acc - s)²`.
pub fn confidence_loss(x: &PredictionMap, yp: &PointMask, s: ConfidenceScore) -> Result<f64> {
    let acc = pixel_accuracy(x, yp)?;
    Ok((acc - s.value()).powi(2))
}

pub fn total_loss(x: &PredictionMap, yp: &PointMask, s: ConfidenceScore, lambda_conf: f64, c_max: f64) -> Result<f64> {
    Ok(aass_loss(x, yp, c_max)? + lambda_conf * confidence_loss(x, yp, s)?)
}

/// Unweighted binary cross-entropy over all pixels and its gradient.
pub(crate) fn bce_grad(logits: &[f64], target: &[u8]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&x, &y)| {
            if y == 1 {
                loss += softplus(-x);
                (sigmoid(x) - 1.0) / n
            } else {
                loss += softplus(x);
                sigmoid(x) / n
            }
        })
        .collect();
    (loss / n, grad)
}

/// Majority label of each `k`×`k` cell; ties go to the smaller label.
pub fn downsample_partition(p: &SourcePartition, k: usize) -> Result<Vec<u8>> {
    if k == 0 || p.height() % k != 0 || p.width() % k != 0 {
        return Err(Error::Argument(format!(
            "partition {}x{} is not divisible into {k}x{k} cells",
            p.height(),
            p.width()
        )));
    }
    let (rows, cols) = (p.height() / k, p.width() / k);
    let mut out = Vec::with_capacity(rows * cols);
    let mut counts = [0usize; 256];
    for r in 0..rows {
        for c in 0..cols {
            counts.fill(0);
            for y in r * k..(r + 1) * k {
                for &l in &p.data()[y * p.width() + c * k..y * p.width() + (c + 1) * k] {
                    counts[l as usize] += 1;
                }
            }
            // max_by_key keeps the last maximum, so scan labels in reverse.
            let best = (0..256).rev().max_by_key(|&l| counts[l]).unwrap_or(0);
            out.push(best as u8);
        }
    }
    Ok(out)
}
