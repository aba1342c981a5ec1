//! Grid-prompt inference: decode one map per grid point, cluster the maps by
//! their representative features, keep the most confident map of each
//! cluster, and merge the survivors into a heatmap or a source partition.

use crate::error::{Error, Result};
use crate::net::{decode, decode_baseline, downsample_bilinear, encode_image, encode_prompt, sigmoid, ModelParams};
use crate::types::{ConfidenceScore, EmbeddingGrid, Heatmap, Image, PointPrompt, PredictionMap, Seed, SourcePartition};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `g`×`g` prompts at cell centers, raster order.
pub fn grid_prompts(h: usize, w: usize, g: usize) -> Result<Vec<PointPrompt>> {
    if g == 0 || h < g || w < g {
        return Err(Error::Argument(format!("cannot place a {g}x{g} prompt grid on {h}x{w} pixels")));
    }
    let at = |i: usize, n: usize| ((i as f64 + 0.5) * n as f64 / g as f64).floor() as usize;
    Ok((0..g)
        .flat_map(|i| (0..g).map(move |j| PointPrompt::new(at(i, h), at(j, w))))
        .collect())
}

/// Mean raw embedding over the cells where the map, bilinearly sampled at
/// cell centers, is positive. `None` when no cell is positive.
pub fn representative_feature(grid: &EmbeddingGrid, x: &PredictionMap) -> Result<Option<Vec<f64>>> {
    let (rows, cols) = (grid.rows(), grid.cols());
    if x.height() % rows != 0 || x.width() % cols != 0 || x.height() / rows != x.width() / cols {
        return Err(Error::ShapeMismatch {
            left: format!("grid {rows}x{cols}"),
            right: format!("prediction {}x{}", x.height(), x.width()),
        });
    }
    let logits: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let cells = downsample_bilinear(&logits, x.height(), x.width(), rows, cols);
    let mut sum = vec![0.0; grid.dim()];
    let mut count = 0usize;
    for (c, &v) in cells.iter().enumerate() {
        if v > 0.0 {
            for (s, e) in sum.iter_mut().zip(grid.cell(c)) {
                *s += e;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    sum.iter_mut().for_each(|s| *s /= count as f64);
    Ok(Some(sum))
}

/// [`representative_feature`], falling back to the embedding of the prompt's
/// own cell. The flag reports whether the fallback was used.
pub fn feature_or_fallback(grid: &EmbeddingGrid, x: &PredictionMap, prompt: PointPrompt) -> Result<(Vec<f64>, bool)> {
    match representative_feature(grid, x)? {
        Some(f) => Ok((f, false)),
        None => {
            prompt.check_bounds(x.height(), x.width())?;
            let r = prompt.row * grid.rows() / x.height();
            let c = prompt.col * grid.cols() / x.width();
            Ok((grid.at(r, c).to_vec(), true))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Kmeans,
    Dbscan,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClusterAssignment {
    /// Cluster index per feature, `0..m`, every index used.
    pub labels: Vec<usize>,
    pub m: usize,
    pub method: ClusterMethod,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.m];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Renumbers labels by first occurrence.
fn canonical(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map: Vec<Option<usize>> = vec![None; labels.iter().max().map_or(0, |m| m + 1)];
    let mut next = 0;
    let out = labels
        .iter()
        .map(|&l| {
            *map[l].get_or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    (out, next)
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERATIONS: usize = 100;

/// k-means++ seeding, Lloyd iterations, best of several restarts by inertia.
pub fn kmeans(features: &[Vec<f64>], m: usize, seed: Seed) -> Result<ClusterAssignment> {
    if features.is_empty() {
        return Err(Error::Argument("k-means needs at least one feature".into()));
    }
    if m == 0 {
        return Err(Error::Argument("k-means needs m >= 1".into()));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Argument("features have different dimensions".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for f in features {
        if !distinct.iter().any(|d| *d == f) {
            distinct.push(f);
        }
    }
    let k = if distinct.len() < m {
        log::warn!("only {} distinct features; reducing M from {m}", distinct.len());
        distinct.len()
    } else {
        m
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = seed.derive_named("kmeans", restart as u64).rng();
        let (labels, inertia) = lloyd(features, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    let (labels, m) = canonical(&best.expect("at least one restart").1);
    Ok(ClusterAssignment {
        labels,
        m,
        method: ClusterMethod::Kmeans,
    })
}

fn kmeans_pp(features: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut centers = vec![features[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // Rounding can leave `pick` on an existing center; take any uncovered point instead.
            if d2[pick] == 0.0 {
                pick = d2.iter().position(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(features[next].clone());
        for (d, f) in d2.iter_mut().zip(features) {
            *d = d.min(sq_dist(f, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn lloyd(features: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let dim = features[0].len();
    let mut centers = kmeans_pp(features, k, rng);
    let mut labels = vec![usize::MAX; features.len()];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (l, f) in labels.iter_mut().zip(features) {
            let nearest = nearest_center(f, &centers);
            if *l != nearest {
                *l = nearest;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&l, f) in labels.iter().zip(features) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster with the point farthest from its center.
                let far = (0..features.len())
                    .max_by(|&a, &b| {
                        let da = sq_dist(&features[a], &centers[labels[a]]);
                        let db = sq_dist(&features[b], &centers[labels[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centers[c] = features[far].clone();
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = labels.iter().zip(features).map(|(&l, f)| sq_dist(f, &centers[l])).sum();
    (labels, inertia)
}

/// Index of the nearest center; ties go to the lower index.
fn nearest_center(f: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(f, c);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Density clustering of the L2-normalized features. Noise points join the
/// cluster of their nearest core point; if there is no core point, M = 1.
pub fn dbscan(features: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if features.is_empty() {
        return Err(Error::Argument("DBSCAN needs at least one feature".into()));
    }
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::Argument(format!("invalid DBSCAN parameters eps={eps}, min_pts={min_pts}")));
    }
    let unit: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                f.iter().map(|v| v / n).collect()
            } else {
                f.clone()
            }
        })
        .collect();
    let n = unit.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| sq_dist(&unit[i], &unit[j]) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut m = 0;
    for start in 0..n {
        if !core[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(m);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(m);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        m += 1;
    }
    if m == 0 {
        return Ok(ClusterAssignment {
            labels: vec![0; n],
            m: 1,
            method: ClusterMethod::Dbscan,
        });
    }
    let cores: Vec<usize> = (0..n).filter(|&i| core[i]).collect();
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            labels[i].unwrap_or_else(|| {
                let nearest = cores
                    .iter()
                    .min_by(|&&a, &&b| sq_dist(&unit[i], &unit[a]).total_cmp(&sq_dist(&unit[i], &unit[b])))
                    .expect("at least one core point");
                labels[*nearest].expect("core points are labelled")
            })
        })
        .collect();
    let (labels, m) = canonical(&labels);
    Ok(ClusterAssignment {
        labels,
        m,
        method: ClusterMethod::Dbscan,
    })
}

/// Most confident prompt per cluster; ties go to the lower prompt index.
pub fn select_confident(assign: &ClusterAssignment, confidences: &[f64]) -> Result<Vec<usize>> {
    if confidences.len() != assign.labels.len() {
        return Err(Error::ShapeMismatch {
            left: format!("{} assignments", assign.labels.len()),
            right: format!("{} confidences", confidences.len()),
        });
    }
    let mut best: Vec<Option<usize>> = vec![None; assign.m];
    for (i, (&l, &s)) in assign.labels.iter().zip(confidences).enumerate() {
        if best[l].is_none_or(|b| s > confidences[b]) {
            best[l] = Some(i);
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(c, b)| b.ok_or_else(|| Error::Argument(format!("cluster {c} has no members"))))
        .collect()
}

fn same_dims(a: &PredictionMap, b: &PredictionMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            left: format!("{}x{}", a.height(), a.width()),
            right: format!("{}x{}", b.height(), b.width()),
        });
    }
    Ok(())
}

/// `½(σ(x_a) + 1 − σ(x_b))`.
pub fn combine_binary(x_a: &PredictionMap, x_b: &PredictionMap) -> Result<Heatmap> {
    same_dims(x_a, x_b)?;
    let data = x_a
        .data()
        .iter()
        .zip(x_b.data())
        .map(|(&a, &b)| {
            // Round |d| the same way for both orders so swapping the sides
            // complements the output exactly.
            let d = 0.5 * (sigmoid(a as f64) - sigmoid(b as f64));
            let hi = (0.5 + d.abs()) as f32;
            if d >= 0.0 {
                hi
            } else {
                1.0 - hi
            }
        })
        .collect();
    Heatmap::new(x_a.height(), x_a.width(), data)
}

/// Per-pixel softmax over the maps. Hard labels are the argmax (ties to the
/// lower map index), compacted so that every emitted label is used.
pub fn combine_softmax(maps: &[PredictionMap]) -> Result<(SourcePartition, Vec<Heatmap>)> {
    if maps.len() < 2 {
        return Err(Error::Argument("softmax combination needs at least two maps".into()));
    }
    for m in &maps[1..] {
        same_dims(&maps[0], m)?;
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut soft = vec![Vec::with_capacity(h * w); maps.len()];
    let mut labels = Vec::with_capacity(h * w);
    let mut z = vec![0.0; maps.len()];
    for p in 0..h * w {
        let mut arg = 0;
        for (k, m) in maps.iter().enumerate() {
            z[k] = m.data()[p] as f64;
            if z[k] > z[arg] {
                arg = k;
            }
        }
        let max = z[arg];
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        for (k, s) in soft.iter_mut().enumerate() {
            s.push(((z[k] - max).exp() / total) as f32);
        }
        labels.push(arg as u32);
    }
    let partition = SourcePartition::compacted(h, w, &labels)?;
    let soft = soft.into_iter().map(|d| Heatmap::new(h, w, d)).collect::<Result<_>>()?;
    Ok((partition, soft))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    Binary,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub grid: usize,
    pub mode: InferMode,
    pub cluster: ClusterMethod,
    /// Cluster count for k-means; 2 when absent.
    pub m: Option<usize>,
    pub eps: f64,
    pub min_pts: usize,
    pub seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            grid: 16,
            mode: InferMode::Binary,
            cluster: ClusterMethod::Kmeans,
            m: None,
            eps: 0.3,
            min_pts: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceOutput {
    /// Forged-side probability (binary mode).
    pub heatmap: Option<Heatmap>,
    /// Hard partition: argmax labels in multi mode, heatmap > 0.5 in binary mode.
    pub partition: SourcePartition,
    /// Softmax maps of the selected prompts (multi mode, M ≥ 2).
    pub soft: Vec<Heatmap>,
    pub prompts: Vec<PointPrompt>,
    pub confidences: Vec<f64>,
    pub fallback: Vec<bool>,
    pub assignment: ClusterAssignment,
    /// Selected prompt index per cluster.
    pub selected: Vec<usize>,
}

impl InferenceOutput {
    pub fn m(&self) -> usize {
        self.assignment.m
    }
}

fn heatmap_partition(map: &Heatmap) -> Result<SourcePartition> {
    let labels: Vec<u32> = map.data().iter().map(|&v| u32::from(v > 0.5)).collect();
    SourcePartition::compacted(map.height(), map.width(), &labels)
}

fn sigmoid_map(x: &PredictionMap) -> Result<Heatmap> {
    let data = x.data().iter().map(|&v| sigmoid(v as f64) as f32).collect();
    Heatmap::new(x.height(), x.width(), data)
}

pub fn infer(params: &ModelParams, img: &Image, opts: &InferOptions) -> Result<InferenceOutput> {
    let (h, w) = (img.height(), img.width());
    let grid = encode_image(params, img)?;
    let prompts = grid_prompts(h, w, opts.grid)?;
    let embeddings = prompts
        .iter()
        .map(|&p| encode_prompt(params, p, h, w))
        .collect::<Result<Vec<_>>>()?;
    let decoded = decode(params, &grid, &embeddings)?;
    let (maps, scores): (Vec<PredictionMap>, Vec<ConfidenceScore>) = decoded.into_iter().unzip();
    let confidences: Vec<f64> = scores.iter().map(|s| s.value()).collect();
    let mut features = Vec::with_capacity(maps.len());
    let mut fallback = Vec::with_capacity(maps.len());
    for (x, &p) in maps.iter().zip(&prompts) {
        let (f, fb) = feature_or_fallback(&grid, x, p)?;
        features.push(f);
        fallback.push(fb);
    }
    let assignment = match opts.cluster {
        ClusterMethod::Kmeans => kmeans(&features, opts.m.unwrap_or(2), Seed(opts.seed))?,
        ClusterMethod::Dbscan => dbscan(&features, opts.eps, opts.min_pts)?,
    };
    let selected = select_confident(&assignment, &confidences)?;
    let mut out = InferenceOutput {
        heatmap: None,
        partition: SourcePartition::uniform(h, w)?,
        soft: Vec::new(),
        prompts,
        confidences,
        fallback,
        assignment,
        selected,
    };
    match opts.mode {
        InferMode::Binary => {
            let heat = if out.selected.len() == 1 {
                sigmoid_map(&maps[out.selected[0]])?
            } else {
                let (a, b) = binary_sides(&out.assignment, &out.selected, &maps);
                combine_binary(&maps[a], &maps[b])?
            };
            out.partition = heatmap_partition(&heat)?;
            out.heatmap = Some(heat);
        }
        InferMode::Multi => {
            if out.selected.len() >= 2 {
                let chosen: Vec<PredictionMap> = out.selected.iter().map(|&i| maps[i].clone()).collect();
                let (partition, soft) = combine_softmax(&chosen)?;
                out.partition = partition;
                out.soft = soft;
            }
        }
    }
    Ok(out)
}

/// Picks the two maps to merge in binary mode: the two largest clusters
/// (members, ties to the lower index), the smaller-area map as forged side.
fn binary_sides(assign: &ClusterAssignment, selected: &[usize], maps: &[PredictionMap]) -> (usize, usize) {
    let sizes = assign.sizes();
    let mut order: Vec<usize> = (0..assign.m).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let (c0, c1) = (order[0].min(order[1]), order[0].max(order[1]));
    let (i0, i1) = (selected[c0], selected[c1]);
    if maps[i1].positive_area() < maps[i0].positive_area() {
        (i1, i0)
    } else {
        (i0, i1)
    }
}

/// σ of the unprompted decoder output (ablation model).
pub fn infer_baseline(params: &ModelParams, img: &Image) -> Result<Heatmap> {
    let grid = encode_image(params, img)?;
    sigmoid_map(&decode_baseline(params, &grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn grid_prompt_positions() {
        let p = grid_prompts(256, 256, 16).unwrap();
        assert_eq!(p.len(), 256);
        assert_eq!(p[0], PointPrompt::new(8, 8));
        assert_eq!(p[1], PointPrompt::new(8, 24));
        assert_eq!(p[16], PointPrompt::new(24, 8));
        assert_eq!(grid_prompts(7, 9, 1).unwrap(), vec![PointPrompt::new(3, 4)]);
        for (h, w) in [(5, 5), (17, 40), (100, 3)] {
            for q in grid_prompts(h, w, 3).unwrap() {
                assert!(q.row < h && q.col < w);
            }
        }
        assert!(grid_prompts(2, 8, 3).is_err());
    }

    fn grid_2x2() -> EmbeddingGrid {
        EmbeddingGrid::new(2, 2, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0, 4.0, 0.0]).unwrap()
    }

    fn cell_map(values: [f32; 4]) -> PredictionMap {
        // 2x2 cells of 8x8 pixels, constant per cell.
        let mut data = vec![0.0; 256];
        for (p, d) in data.iter_mut().enumerate() {
            let (r, c) = (p / 16, p % 16);
            *d = values[(r / 8) * 2 + c / 8];
        }
        PredictionMap::new(16, 16, data).unwrap()
    }

    #[test]
    fn representative_feature_cases() {
        let g = grid_2x2();
        let one = representative_feature(&g, &cell_map([-1.0, 3.0, -1.0, -1.0])).unwrap();
        assert_eq!(one, Some(vec![0.0, 1.0]));
        let all = representative_feature(&g, &cell_map([1.0; 4])).unwrap().unwrap();
        assert_eq!(all, vec![1.75, 0.75]);
        let none = cell_map([-1.0; 4]);
        assert_eq!(representative_feature(&g, &none).unwrap(), None);
        let (f, fb) = feature_or_fallback(&g, &none, PointPrompt::new(12, 3)).unwrap();
        assert!(fb);
        assert_eq!(f, vec![2.0, 2.0]);
    }

    fn blobs(seed: u64, centers: &[[f64; 3]], per: usize, sd: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut f = Vec::new();
        let mut truth = Vec::new();
        for i in 0..per * centers.len() {
            let c = i % centers.len();
            f.push(centers[c].iter().map(|v| v + noise.sample(&mut rng)).collect());
            truth.push(c);
        }
        (f, truth)
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn kmeans_recovers_blobs() {
        let (f, truth) = blobs(1, &[[0.0, 0.0, 0.0], [5.0, 5.0, 0.0]], 30, 0.3);
        let a = kmeans(&f, 2, Seed(0)).unwrap();
        assert_eq!(a.m, 2);
        assert!(same_partition(&a.labels, &truth));
        assert_eq!(a, kmeans(&f, 2, Seed(0)).unwrap());
    }

    #[test]
    fn kmeans_degenerate_cases() {
        let same = vec![vec![1.0, 2.0]; 5];
        let a = kmeans(&same, 2, Seed(0)).unwrap();
        assert_eq!((a.m, a.labels.clone()), (1, vec![0; 5]));
        let (f, _) = blobs(2, &[[0.0; 3], [1.0; 3]], 4, 0.1);
        assert_eq!(kmeans(&f, 1, Seed(0)).unwrap().labels, vec![0; 8]);
        assert!(kmeans(&[], 2, Seed(0)).is_err());
    }

    #[test]
    fn dbscan_cases() {
        let (f, truth) = blobs(3, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 10, 0.02);
        let a = dbscan(&f, 0.3, 3).unwrap();
        assert_eq!(a.m, 2);
        assert!(same_partition(&a.labels, &truth));
        let (g, _) = blobs(4, &[[1.0, 1.0, 0.0]], 10, 0.02);
        assert_eq!(dbscan(&g, 0.3, 3).unwrap().m, 1);
        assert_eq!(dbscan(&f, 10.0, 3).unwrap().m, 1);
        // Everything noise.
        let sparse = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert_eq!(dbscan(&sparse, 0.3, 2).unwrap().labels, vec![0, 0, 0]);
    }

    #[test]
    fn dbscan_noise_joins_nearest_core() {
        let mut f = vec![vec![1.0, 0.0]; 4];
        f.extend(vec![vec![0.0, 1.0]; 4]);
        // Border-ish outlier closer to the second group.
        f.push(vec![0.45, 0.89]);
        let a = dbscan(&f, 0.3, 3).unwrap();
        assert_eq!(a.m, 2);
        assert_eq!(a.labels[8], a.labels[4]);
    }

    #[test]
    fn select_confident_rules() {
        let a = ClusterAssignment {
            labels: vec![0, 1, 0, 1, 1],
            m: 2,
            method: ClusterMethod::Kmeans,
        };
        assert_eq!(select_confident(&a, &[0.2, 0.5, 0.9, 0.5, 0.1]).unwrap(), vec![2, 1]);
    }

    #[test]
    fn combine_binary_properties() {
        let a = PredictionMap::new(1, 3, vec![-2.0, 0.0, 3.5]).unwrap();
        let neg = PredictionMap::new(1, 3, vec![2.0, 0.0, -3.5]).unwrap();
        let out = combine_binary(&a, &neg).unwrap();
        for (o, &x) in out.data().iter().zip(a.data()) {
            assert!((*o - sigmoid(x as f64) as f32).abs() <= f32::EPSILON);
        }
        let zero = PredictionMap::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(combine_binary(&zero, &zero).unwrap().data().iter().all(|&v| v == 0.5));
        let ab = combine_binary(&a, &zero).unwrap();
        let ba = combine_binary(&zero, &a).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert_eq!(x + y, 1.0);
        }
    }

    #[test]
    fn combine_softmax_cases() {
        let a = PredictionMap::new(1, 2, vec![5.0, 1.0]).unwrap();
        let b = PredictionMap::new(1, 2, vec![-5.0, 1.0]).unwrap();
        let (p, soft) = combine_softmax(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(p.data(), &[0, 0]);
        assert!((soft[0].data()[0] as f64 - 1.0 / (1.0 + (-10f64).exp())).abs() < 1e-6);
        assert_eq!(soft[1].data()[1], 0.5);
        let (q, _) = combine_softmax(&[b, a]).unwrap();
        assert_eq!(q.data(), &[1, 0]);
    }
}
