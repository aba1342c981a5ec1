//! Label-agnostic localization metrics and the robustness harness.
//!
//! Binary scores are taken as the better of the heatmap and its complement;
//! multi-source scores maximize over label matchings. Mean IoU is computed in
//! exact rational arithmetic so the assignment solver and the exhaustive
//! search agree to the last bit.

use crate::dataset::{png_names, Dataset};
use crate::error::{Error, Result};
use crate::inference::{infer, InferMode, InferOptions};
use crate::io::{read_binary_mask_png, read_gray8, read_heatmap, read_partition_png};
use crate::net::ModelParams;
use crate::synth::{apply_transform, Transform};
use crate::types::{BinaryMask, Heatmap, Seed, SourcePartition};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn dims_match(a: (usize, usize), b: (usize, usize), what: (&str, &str)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            left: format!("{} {}x{}", what.0, a.0, a.1),
            right: format!("{} {}x{}", what.1, b.0, b.1),
        });
    }
    Ok(())
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// F1 of class 1 with prediction `x > t`. Empty truth and prediction scores 1.
pub fn f1(y: &BinaryMask, x: &Heatmap, t: f64) -> Result<f64> {
    dims_match((y.height(), y.width()), (x.height(), x.width()), ("mask", "heatmap"))?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&g, &v) in y.data().iter().zip(x.data()) {
        match (g == 1, v as f64 > t) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

pub fn permuted_f1_fixed(y: &BinaryMask, x: &Heatmap) -> Result<f64> {
    Ok(f1(y, x, 0.5)?.max(f1(y, &x.complement(), 0.5)?))
}

/// Best permuted F1 over thresholds `k/256`, `k = 1..=255`.
pub fn permuted_f1_best(y: &BinaryMask, x: &Heatmap) -> Result<f64> {
    dims_match((y.height(), y.width()), (x.height(), x.width()), ("mask", "heatmap"))?;
    Ok(best_f1_sweep(y, x).max(best_f1_sweep(y, &x.complement())))
}

/// One pass histogram sweep: `v > k/256` exactly when `k <= ceil(256 v) - 1`.
fn best_f1_sweep(y: &BinaryMask, x: &Heatmap) -> f64 {
    let mut pos = [0usize; 257];
    let mut neg = [0usize; 257];
    for (&g, &v) in y.data().iter().zip(x.data()) {
        let top = ((v as f64 * 256.0).ceil() as i64 - 1).clamp(-1, 255);
        let slot = (top + 1) as usize;
        if g == 1 {
            pos[slot] += 1;
        } else {
            neg[slot] += 1;
        }
    }
    let positives: usize = pos.iter().sum();
    // Suffix sums over slots > k, i.e. top >= k.
    let (mut tp, mut fp) = (0, 0);
    let mut best = 0.0f64;
    for k in (1..=255).rev() {
        tp += pos[k + 1];
        fp += neg[k + 1];
        best = best.max(f1_from_counts(tp, fp, positives - tp));
    }
    best
}

fn labels_of(p: &SourcePartition) -> Vec<usize> {
    p.data().iter().map(|&v| v as usize).collect()
}

/// Predicted labels that take part in matching: all of them, or the `n`
/// largest when there are more than `n` (ties to the lower label).
fn kept_labels(x: &SourcePartition, n: usize) -> Vec<usize> {
    let areas = x.areas();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    if order.len() > n {
        order.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
        order.truncate(n);
        order.sort_unstable();
    }
    order
}

/// Exact IoU of every (truth class, kept predicted label) pair.
fn iou_matrix(y: &SourcePartition, x: &SourcePartition) -> Result<(Vec<Vec<BigRational>>, usize)> {
    dims_match((y.height(), y.width()), (x.height(), x.width()), ("truth", "prediction"))?;
    let n = y.sources();
    let kept = kept_labels(x, n);
    let mut inter = vec![vec![0usize; x.sources()]; n];
    for (&a, &b) in y.data().iter().zip(x.data()) {
        inter[a as usize][b as usize] += 1;
    }
    let (ya, xa) = (y.areas(), x.areas());
    let m = kept
        .iter()
        .map(|&j| {
            (0..n)
                .map(|i| {
                    let union = ya[i] + xa[j] - inter[i][j];
                    BigRational::new(BigInt::from(inter[i][j]), BigInt::from(union))
                })
                .collect()
        })
        .collect::<Vec<Vec<_>>>();
    // Transpose to truth-major.
    let matrix = (0..n).map(|i| m.iter().map(|col| col[i].clone()).collect()).collect();
    Ok((matrix, n))
}

fn rational_mean(total: BigRational, n: usize) -> f64 {
    (total / BigRational::from_integer(BigInt::from(n)))
        .to_f64()
        .expect("bounded rational")
}

/// Mean over truth classes of the IoU under the best injective matching of
/// truth classes to predicted labels. Unmatched truth classes score 0.
pub fn permuted_miou(y: &SourcePartition, x: &SourcePartition) -> Result<f64> {
    let (m, n) = iou_matrix(y, x)?;
    let cols = m[0].len();
    let size = n.max(cols);
    let zero = BigRational::zero();
    let cost: Vec<Vec<BigRational>> = (0..size)
        .map(|i| (0..size).map(|j| if i < n && j < cols { -m[i][j].clone() } else { zero.clone() }).collect())
        .collect();
    let assignment = hungarian(&cost);
    let total = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < n && j < cols)
        .fold(BigRational::zero(), |acc, (i, &j)| acc + &m[i][j]);
    Ok(rational_mean(total, n))
}

/// Minimum-cost perfect matching on a square matrix (shortest augmenting
/// paths with potentials). Returns the column assigned to each row.
fn hungarian(cost: &[Vec<BigRational>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays with a virtual row/column 0.
    let mut u = vec![BigRational::zero(); n + 1];
    let mut v = vec![BigRational::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv: Vec<Option<BigRational>> = vec![None; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta: Option<BigRational> = None;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = &cost[i0 - 1][j - 1] - &u[i0] - &v[j];
                if minv[j].as_ref().is_none_or(|m| cur < *m) {
                    minv[j] = Some(cur);
                    way[j] = j0;
                }
                let mj = minv[j].as_ref().expect("set above");
                if delta.as_ref().is_none_or(|d| mj < d) {
                    delta = Some(mj.clone());
                    j1 = j;
                }
            }
            let delta = delta.expect("an unused column remains");
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += &delta;
                    v[j] -= &delta;
                } else if let Some(m) = minv[j].as_mut() {
                    *m -= &delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Largest effective label count the exhaustive search accepts.
pub const BRUTE_FORCE_MAX_LABELS: usize = 6;

/// Exhaustive version of [`permuted_miou`] over all injective matchings.
pub fn brute_force_pmiou(y: &SourcePartition, x: &SourcePartition) -> Result<f64> {
    let (m, n) = iou_matrix(y, x)?;
    let cols = m[0].len();
    if n.max(cols) > BRUTE_FORCE_MAX_LABELS {
        return Err(Error::Argument(format!(
            "exhaustive matching limited to {BRUTE_FORCE_MAX_LABELS} labels, got {}",
            n.max(cols)
        )));
    }
    fn search(m: &[Vec<BigRational>], i: usize, used: &mut Vec<bool>, acc: BigRational, best: &mut BigRational) {
        if i == m.len() {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        // Leave truth class i unmatched.
        search(m, i + 1, used, acc.clone(), best);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                search(m, i + 1, used, &acc + &m[i][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = BigRational::zero();
    search(&m, 0, &mut vec![false; cols], BigRational::zero(), &mut best);
    Ok(rational_mean(best, n))
}

fn choose2(k: u128) -> u128 {
    k * k.saturating_sub(1) / 2
}

/// Adjusted Rand index over pixels. Degenerate tables (both partitions
/// trivial in the same way) score 1.
pub fn ari(y: &SourcePartition, x: &SourcePartition) -> Result<f64> {
    dims_match((y.height(), y.width()), (x.height(), x.width()), ("truth", "prediction"))?;
    let (ly, lx) = (labels_of(y), labels_of(x));
    let mut table = vec![vec![0u128; x.sources()]; y.sources()];
    for (&a, &b) in ly.iter().zip(&lx) {
        table[a][b] += 1;
    }
    let index: u128 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let a: u128 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let b: u128 = (0..x.sources())
        .map(|j| choose2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = choose2(ly.len() as u128);
    // (index - a·b/total) / ((a + b)/2 - a·b/total), scaled by 2·total.
    let num = 2 * index as i128 * total as i128 - 2 * (a * b) as i128;
    let den = (a + b) as i128 * total as i128 - 2 * (a * b) as i128;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// Which metric an evaluation run computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    F1Fixed,
    F1Best,
    Pmiou,
    Ari,
}

impl EvalMetric {
    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::F1Fixed => "f1_fixed",
            EvalMetric::F1Best => "f1_best",
            EvalMetric::Pmiou => "pmiou",
            EvalMetric::Ari => "ari",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, EvalMetric::F1Fixed | EvalMetric::F1Best)
    }
}

/// File stem without extension.
fn stem(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(s, _)| s)
}

/// Heatmap for `stem` in an inference output directory: `STEM.safr`, else
/// the 8-bit `STEM.heatmap.png`.
pub fn read_prediction_heatmap(dir: &Path, stem: &str) -> Result<Heatmap> {
    let safr = dir.join(format!("{stem}.safr"));
    if safr.is_file() {
        return read_heatmap(&safr);
    }
    let (h, w, raw) = read_gray8(&dir.join(format!("{stem}.heatmap.png")))?;
    Heatmap::new(h, w, raw.into_iter().map(|v| v as f32 / 255.0).collect())
}

/// Per-image scores of the predictions in `pred` against every ground-truth
/// PNG in `gt`, matched by file stem.
pub fn evaluate_dirs(pred: &Path, gt: &Path, metric: EvalMetric) -> Result<Vec<(String, f64)>> {
    let names = png_names(gt)?;
    if names.is_empty() {
        return Err(Error::Config(format!("no ground-truth PNGs in {}", gt.display())));
    }
    names
        .iter()
        .map(|name| {
            let s = stem(name);
            let gt_path = gt.join(name);
            let score = if metric.is_binary() {
                let y = read_binary_mask_png(&gt_path)?;
                let x = read_prediction_heatmap(pred, s)?;
                match metric {
                    EvalMetric::F1Fixed => permuted_f1_fixed(&y, &x)?,
                    _ => permuted_f1_best(&y, &x)?,
                }
            } else {
                let y = read_partition_png(&gt_path)?;
                let x = read_partition_png(&pred.join(format!("{s}.partition.png")))?;
                match metric {
                    EvalMetric::Pmiou => permuted_miou(&y, &x)?,
                    _ => ari(&y, &x)?,
                }
            };
            Ok((s.to_string(), score))
        })
        .collect()
}

/// Post-processing family swept by [`robustness_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Blur,
    Noise,
    Jpeg,
    Gamma,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Blur => "blur",
            TransformKind::Noise => "noise",
            TransformKind::Jpeg => "jpeg",
            TransformKind::Gamma => "gamma",
        }
    }

    /// Level semantics: blur and noise sigma, JPEG quality, gamma exponent.
    pub fn at(self, level: f64) -> Result<Transform> {
        if !level.is_finite() {
            return Err(Error::Argument(format!("non-finite {} level", self.name())));
        }
        Ok(match self {
            TransformKind::Blur => Transform::Blur { sigma: level },
            TransformKind::Noise => Transform::Noise { sigma: level },
            TransformKind::Gamma => Transform::Gamma { gamma: level },
            TransformKind::Jpeg => {
                if !(1.0..=100.0).contains(&level) || level.fract() != 0.0 {
                    return Err(Error::Argument(format!("JPEG quality must be an integer in 1..=100, got {level}")));
                }
                Transform::Jpeg { quality: level as u8 }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub transform: String,
    pub level: f64,
    pub score: f64,
    pub n_images: usize,
}

/// Mean permuted F1 (fixed threshold) of binary inference over the dataset.
pub fn mean_binary_score(params: &ModelParams, data: &Dataset, opts: &InferOptions) -> Result<f64> {
    let scores = binary_scores(params, data, opts, None)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn binary_scores(
    params: &ModelParams,
    data: &Dataset,
    opts: &InferOptions,
    transform: Option<(Transform, Seed)>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let opts = InferOptions {
        mode: InferMode::Binary,
        ..opts.clone()
    };
    data.entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let image = match transform {
                Some((t, seed)) => apply_transform(&e.image, t, seed.derive(i as u64))?,
                None => e.image.clone(),
            };
            let out = infer(params, &image, &opts)?;
            permuted_f1_fixed(&e.mask, out.heatmap.as_ref().expect("binary mode yields a heatmap"))
        })
        .collect()
}

/// One row per level: mean permuted F1 (fixed) of binary inference on the
/// transformed images; masks are untouched.
pub fn robustness_report(
    params: &ModelParams,
    data: &Dataset,
    kind: TransformKind,
    levels: &[f64],
    opts: &InferOptions,
    seed: Seed,
) -> Result<Vec<RobustnessRow>> {
    levels
        .iter()
        .enumerate()
        .map(|(k, &level)| {
            let t = kind.at(level)?;
            let scores = binary_scores(params, data, opts, Some((t, seed.derive_named(kind.name(), k as u64))))?;
            let score = scores.iter().sum::<f64>() / scores.len() as f64;
            log::info!("{} level {level}: {score:.4}", kind.name());
            Ok(RobustnessRow {
                transform: kind.name().to_string(),
                level,
                score,
                n_images: scores.len(),
            })
        })
        .collect()
}

pub fn write_robustness_csv(rows: &[RobustnessRow], path: &Path) -> Result<()> {
    let mut out = String::from("transform,level,score,n_images\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.transform, r.level, r.score, r.n_images));
    }
    crate::io::write_all(path, out.as_bytes())
}

/// CSV `image,METRIC` plus a final `mean` row.
pub fn write_eval_csv(metric: EvalMetric, scores: &[(String, f64)], path: &Path) -> Result<()> {
    let mut out = format!("image,{}\n", metric.name());
    for (name, s) in scores {
        out.push_str(&format!("{name},{s}\n"));
    }
    let mean = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len().max(1) as f64;
    out.push_str(&format!("mean,{mean}\n"));
    crate::io::write_all(path, out.as_bytes())
}
