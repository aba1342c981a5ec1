//! Acceptance suite. Runs as a plain binary (no libtest harness) so that every
//! criterion prints exactly one PASS/FAIL line, in order.
//!
//! `cargo test -p safire --test acceptance` runs everything; trailing numeric
//! arguments (`-- 1 4 8`) restrict the run to those criteria.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safire::dataset::Dataset;
use safire::inference::{combine_binary, infer, infer_baseline, ClusterMethod, InferMode, InferOptions};
use safire::io::{encode_safr, write_heatmap, write_partition_png};
use safire::losses::{aass_weights, confidence_loss, r2r_loss, R2RBatch};
use safire::maskops::point_mask;
use safire::metrics::{
    ari, brute_force_pmiou, mean_binary_score, permuted_f1_fixed, permuted_miou, robustness_report, TransformKind,
};
use safire::net::{
    decode, encode_image, encode_prompt, gradcheck_fixture, gradient_check, LossSpec, Mode, ModelParams,
};
use safire::synth::{generate_sample_with, SynthConfig};
use safire::trainer::{pretrain, train, train_baseline, PretrainConfig, TrainConfig};
use safire::{
    BinaryMask, ConfidenceScore, EmbeddingGrid, PointMask, PointPrompt, PredictionMap, Seed, SourcePartition,
};
use std::collections::VecDeque;
use std::time::{Duration, Instant};

const TRAIN_SEED: Seed = Seed(20_241);
const TEST_SEED: Seed = Seed(20_242);
const MULTI_SEED: Seed = Seed(20_243);
const IMAGE_SIZE: usize = 256;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- criterion 1

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (mode, name) in [(Mode::Pretrain, "L_R2R"), (Mode::Train, "L_train")] {
        let (params, batch) = gradcheck_fixture(mode, Seed(1)).map_err(fail)?;
        let r = gradient_check(&params, &batch, &LossSpec::default(), 100, 1e-4, Seed(7)).map_err(fail)?;
        ok &= r.checked >= 100 && r.max_rel_error < 1e-4;
        parts.push(format!(
            "{name}: {} coords, max rel err {:.2e} ({} skipped)",
            r.checked, r.max_rel_error, r.skipped
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    check(ok, format!("{}; {:.1}s", parts.join("; "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

/// 4-connected flood fill of the pixels equal to `mask[start]`.
fn flood(mask: &[u8], h: usize, w: usize, start: usize) -> Vec<bool> {
    let mut inside = vec![false; h * w];
    let value = mask[start];
    let mut queue = VecDeque::from([start]);
    inside[start] = true;
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !inside[j] && mask[j] == value {
                inside[j] = true;
                queue.push_back(j);
            }
        };
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
    }
    inside
}

/// Expected point mask: 1 on the prompt's component, 0 on every component
/// touching it (8-neighbourhood), -1 elsewhere.
fn point_mask_oracle(mask: &[u8], h: usize, w: usize, p: usize) -> Vec<i8> {
    let region = flood(mask, h, w, p);
    let mut out: Vec<i8> = region.iter().map(|&r| if r { 1 } else { -1 }).collect();
    for i in 0..h * w {
        if region[i] || out[i] == 0 {
            continue;
        }
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let touches = (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (ny, nx) = (y + dy, x + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && region[ny as usize * w + nx as usize]
            })
        });
        if touches {
            for (o, inside) in out.iter_mut().zip(flood(mask, h, w, i)) {
                if inside {
                    *o = 0;
                }
            }
        }
    }
    out
}

fn random_mask(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<u8>) {
    let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
    let mut data = vec![0u8; h * w];
    if rng.random_bool(0.5) {
        let density = rng.random_range(0.1..0.9);
        data.iter_mut().for_each(|v| *v = u8::from(rng.random_bool(density)));
    } else {
        for _ in 0..rng.random_range(1..6) {
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    data[y * w + x] ^= 1;
                }
            }
        }
    }
    (h, w, data)
}

fn point_masks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..1000 {
        let (h, w, data) = random_mask(&mut rng);
        let p = rng.random_range(0..h * w);
        let expected = point_mask_oracle(&data, h, w, p);
        let mask = BinaryMask::new(h, w, data).map_err(fail)?;
        let got: PointMask = point_mask(&mask, PointPrompt::new(p / w, p % w)).map_err(fail)?;
        if got.data() != expected.as_slice() {
            failures += 1;
        }
    }
    check(failures == 0, format!("1000 cases, {failures} disagreements with the flood-fill oracle"))
}

// ---------------------------------------------------------------- criterion 3

fn random_partition(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: usize) -> SourcePartition {
    loop {
        let mut data: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..labels as u32)).collect();
        // Blocky structure so that overlaps are uneven.
        if rng.random_bool(0.5) {
            let l = rng.random_range(0..labels as u32);
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            for y in y0..h {
                for x in x0..w {
                    data[y * w + x] = l;
                }
            }
        }
        let p = SourcePartition::compacted(h, w, &data).expect("valid labels");
        if p.sources() == labels {
            return p;
        }
    }
}

fn choose2(k: f64) -> f64 {
    k * (k - 1.0) / 2.0
}

/// Hubert–Arabie formula evaluated directly on the contingency table.
fn ari_oracle(y: &SourcePartition, x: &SourcePartition) -> f64 {
    let mut table = vec![vec![0f64; x.sources()]; y.sources()];
    for (&a, &b) in y.data().iter().zip(x.data()) {
        table[a as usize][b as usize] += 1.0;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..x.sources())
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = choose2(y.data().len() as f64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut pmiou_bad, mut ari_worst, mut unequal_counts) = (0, 0f64, 0);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(3..12), rng.random_range(3..12));
        let (n_true, n_pred) = (rng.random_range(2..=5), rng.random_range(2..=5));
        unequal_counts += usize::from(n_true != n_pred);
        let y = random_partition(&mut rng, h, w, n_true);
        let x = random_partition(&mut rng, h, w, n_pred);
        let fast = permuted_miou(&y, &x).map_err(fail)?;
        let brute = brute_force_pmiou(&y, &x).map_err(fail)?;
        if fast != brute {
            pmiou_bad += 1;
        }
        let a = ari(&y, &x).map_err(fail)?;
        ari_worst = ari_worst.max((a - ari_oracle(&y, &x)).abs());
    }
    check(
        pmiou_bad == 0 && ari_worst <= 1e-12 && unequal_counts > 0,
        format!(
            "200 pairs ({unequal_counts} with N_pred != N): {pmiou_bad} p_mIoU mismatches, max ARI deviation {ari_worst:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn closed_forms() -> Outcome {
    // 4×4 grid: the left 6 cells on axis 0, the other 10 on axis 1.
    let (dim, rows, cols) = (4, 4, 4);
    let split = 6;
    let mut data = vec![0.0; rows * cols * dim];
    let mut labels = vec![0u8; rows * cols];
    for c in 0..rows * cols {
        let axis = usize::from(c >= split);
        data[c * dim + axis] = 1.0;
        labels[c] = axis as u8;
    }
    let grid = EmbeddingGrid::new(dim, rows, cols, data).map_err(fail)?;
    let got = r2r_loss(&R2RBatch {
        grid: &grid,
        labels: &labels,
        tau: 0.1,
        normalize: true,
    })
    .map_err(fail)?
    .ok_or("no anchors")?;
    let per_anchor = |m: f64| -(10f64.exp() / (10f64.exp() + m)).ln();
    let (a, b) = (split as f64, (rows * cols - split) as f64);
    let expected = (a * per_anchor(b) + b * per_anchor(a)) / (a + b);
    let r2r_err = (got - expected).abs();

    let mut yp = vec![0i8; 100];
    yp[37] = 1;
    let (w1, w0) = aass_weights(&PointMask::new(10, 10, yp.clone()).map_err(fail)?, 10.0).map_err(fail)?;
    let w0_expected = 100.0 / 99.0;

    let x = PredictionMap::new(10, 10, yp.iter().map(|&v| if v == 1 { 2.0 } else { -2.0 }).collect()).map_err(fail)?;
    let conf = confidence_loss(&x, &PointMask::new(10, 10, yp).map_err(fail)?, ConfidenceScore::new(0.5).map_err(fail)?)
        .map_err(fail)?;

    check(
        r2r_err <= 1e-9 && w1 == 10.0 && (w0 - w0_expected).abs() < 1e-12 && (w0 - 1.0101).abs() < 5e-5 && conf == 0.25,
        format!("r2r {got:.12} vs {expected:.12}; w1 {w1}, w0 {w0:.6}; confidence loss {conf}"),
    )
}

// ---------------------------------------------------------- criteria 5, 6, 7

fn synthetic(master: Seed, count: usize, sources: usize) -> Result<Dataset, String> {
    let cfg = SynthConfig::strong();
    let samples = (0..count)
        .map(|i| {
            generate_sample_with(&cfg, master.derive(i as u64), IMAGE_SIZE, sources)
                .map(|s| (s.image, s.partition))
                .map_err(fail)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset::from_samples(samples))
}

struct Trained {
    pretrained: ModelParams,
    model: ModelParams,
    train: Dataset,
    test: Dataset,
    f1: f64,
}

fn end_to_end_binary() -> Result<(Outcome, Trained), String> {
    let start = Instant::now();
    let train_set = synthetic(TRAIN_SEED, 500, 2)?;
    let test_set = synthetic(TEST_SEED, 100, 2)?;
    let pre = pretrain(&PretrainConfig::default(), &train_set, Seed(1)).map_err(fail)?;
    let trained = train(&TrainConfig::default(), &train_set, &pre.checkpoint.params, Seed(2)).map_err(fail)?;
    let model = trained.checkpoint.params;
    let opts = InferOptions::default();
    let (mut f1, mut miou) = (0.0, 0.0);
    for e in &test_set.entries {
        let out = infer(&model, &e.image, &opts).map_err(fail)?;
        f1 += permuted_f1_fixed(&e.mask, out.heatmap.as_ref().expect("binary mode")).map_err(fail)?;
        miou += permuted_miou(e.partition.as_ref().expect("synthetic partition"), &out.partition).map_err(fail)?;
    }
    let n = test_set.len() as f64;
    let (f1, miou) = (f1 / n, miou / n);
    let elapsed = start.elapsed();
    let outcome = check(
        f1 >= 0.80 && miou >= 0.75 && elapsed <= Duration::from_secs(30 * 60),
        format!(
            "permuted F1 {f1:.4}, p_mIoU {miou:.4} on 100 test images; {:.1} min",
            elapsed.as_secs_f64() / 60.0
        ),
    );
    Ok((
        outcome,
        Trained {
            pretrained: pre.checkpoint.params,
            model,
            train: train_set,
            test: test_set,
            f1,
        },
    ))
}

fn end_to_end_multi(t: &Trained) -> Outcome {
    let data = synthetic(MULTI_SEED, 50, 3)?;
    let kmeans = InferOptions {
        mode: InferMode::Multi,
        m: Some(3),
        ..InferOptions::default()
    };
    let dbscan = InferOptions {
        mode: InferMode::Multi,
        cluster: ClusterMethod::Dbscan,
        ..InferOptions::default()
    };
    let (mut total, mut hits) = (0.0, 0);
    let mut counts = [0usize; 6];
    for e in &data.entries {
        let truth = e.partition.as_ref().expect("synthetic partition");
        let out = infer(&t.model, &e.image, &kmeans).map_err(fail)?;
        total += ari(truth, &out.partition).map_err(fail)?;
        let m = infer(&t.model, &e.image, &dbscan).map_err(fail)?.m();
        hits += usize::from(m == 3);
        counts[m.min(5)] += 1;
    }
    let mean = total / data.len() as f64;
    let rate = hits as f64 / data.len() as f64;
    check(
        mean >= 0.6 && rate >= 0.6,
        format!(
            "k-means mean ARI {mean:.4}; DBSCAN M=3 on {hits}/50 ({:.0}%), M histogram 1..5+ {:?}",
            rate * 100.0,
            &counts[1..]
        ),
    )
}

fn ablation(t: &Trained) -> Outcome {
    let baseline = train_baseline(&TrainConfig::default(), &t.train, &t.pretrained, Seed(3)).map_err(fail)?;
    let mut f1 = 0.0;
    for e in &t.test.entries {
        let heatmap = infer_baseline(&baseline.checkpoint.params, &e.image).map_err(fail)?;
        f1 += permuted_f1_fixed(&e.mask, &heatmap).map_err(fail)?;
    }
    let f1 = f1 / t.test.len() as f64;
    check(f1 < t.f1, format!("plain segmenter F1 {f1:.4} vs prompted pipeline {:.4}", t.f1))
}

// ---------------------------------------------------------------- criterion 8

fn batching_equality(params: &ModelParams) -> Result<bool, String> {
    let data = synthetic(Seed(81), 2, 3)?;
    let mut same = true;
    for e in &data.entries {
        let grid = encode_image(params, &e.image).map_err(fail)?;
        let prompts = safire::inference::grid_prompts(IMAGE_SIZE, IMAGE_SIZE, 6).map_err(fail)?;
        let embeddings = prompts
            .iter()
            .map(|&p| encode_prompt(params, p, IMAGE_SIZE, IMAGE_SIZE))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fail)?;
        let batched = decode(params, &grid, &embeddings).map_err(fail)?;
        for (b, emb) in batched.iter().zip(&embeddings) {
            let single = decode(params, &grid, std::slice::from_ref(emb)).map_err(fail)?;
            same &= single[0].0.data() == b.0.data() && single[0].1 == b.1;
        }
    }
    Ok(same)
}

/// Bytes of every artifact of a miniature pipeline run.
fn pipeline_bytes(threads: usize) -> Result<Vec<Vec<u8>>, String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(fail)?;
    pool.install(|| {
        let cfg = SynthConfig::strong();
        let samples = (0..6)
            .map(|i| generate_sample_with(&cfg, Seed(82).derive(i), 64, 2).map(|s| (s.image, s.partition)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fail)?;
        let data = Dataset::from_samples(samples);
        let pre = pretrain(
            &PretrainConfig {
                epochs: 2,
                batch_size: 4,
                ..PretrainConfig::default()
            },
            &data,
            Seed(5),
        )
        .map_err(fail)?;
        let tr = train(
            &TrainConfig {
                epochs: 2,
                batch_size: 4,
                ..TrainConfig::default()
            },
            &data,
            &pre.checkpoint.params,
            Seed(6),
        )
        .map_err(fail)?;
        let mut out = vec![pre.checkpoint.to_bytes().map_err(fail)?, tr.checkpoint.to_bytes().map_err(fail)?];
        let dir = tempfile::tempdir().map_err(fail)?;
        for (i, e) in data.entries.iter().take(2).enumerate() {
            let r = infer(&tr.checkpoint.params, &e.image, &InferOptions::default()).map_err(fail)?;
            let h = r.heatmap.expect("binary mode");
            out.push(encode_safr(&[h.height() as u32, h.width() as u32], h.data()).map_err(fail)?);
            let (hp, pp) = (dir.path().join(format!("{i}.safr")), dir.path().join(format!("{i}.png")));
            write_heatmap(&h, &hp).map_err(fail)?;
            write_partition_png(&r.partition, &pp).map_err(fail)?;
            out.push(std::fs::read(hp).map_err(fail)?);
            out.push(std::fs::read(pp).map_err(fail)?);
        }
        Ok(out)
    })
}

fn antisymmetry() -> Result<bool, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ok = true;
    for _ in 0..20 {
        let mut map = || {
            let data = (0..32 * 32).map(|_| rng.random_range(-12.0f32..12.0)).collect();
            PredictionMap::new(32, 32, data).expect("valid dims")
        };
        let (a, b) = (map(), map());
        let ab = combine_binary(&a, &b).map_err(fail)?;
        let ba = combine_binary(&b, &a).map_err(fail)?;
        ok &= ab.data().iter().zip(ba.data()).all(|(x, y)| x + y == 1.0);
    }
    Ok(ok)
}

fn identity_rows(params: &ModelParams, test: &Dataset) -> Result<bool, String> {
    let subset = Dataset::from_entries(test.entries.iter().take(10).cloned().collect());
    let opts = InferOptions::default();
    let clean = mean_binary_score(params, &subset, &opts).map_err(fail)?;
    let mut ok = true;
    for (kind, level) in [
        (TransformKind::Blur, 0.0),
        (TransformKind::Noise, 0.0),
        (TransformKind::Jpeg, 100.0),
        (TransformKind::Gamma, 1.0),
    ] {
        let rows = robustness_report(params, &subset, kind, &[level], &opts, Seed(9)).map_err(fail)?;
        ok &= rows.len() == 1 && rows[0].score == clean && rows[0].n_images == subset.len();
    }
    Ok(ok)
}

fn contracts(trained: Option<&Trained>) -> Outcome {
    let fallback = ModelParams::init(Seed(4));
    let params = trained.map_or(&fallback, |t| &t.model);
    let batching = batching_equality(params)?;
    let first = pipeline_bytes(1)?;
    let deterministic = first == pipeline_bytes(1)? && first == pipeline_bytes(3)?;
    let antisym = antisymmetry()?;
    let identity = match trained {
        Some(t) => identity_rows(params, &t.test)?,
        None => identity_rows(params, &synthetic(TEST_SEED, 10, 2)?)?,
    };
    check(
        batching && deterministic && antisym && identity,
        format!(
            "batching bit-exact {batching}; byte-identical reruns (1 and 3 threads) {deterministic}; \
             antisymmetry {antisym}; identity robustness rows {identity}"
        ),
    )
}

// ---------------------------------------------------------------------- main

fn report(number: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {number} ({name}): PASS - {detail}"),
        Err(detail) => println!("criterion {number} ({name}): FAIL - {detail}"),
    }
    outcome.is_ok()
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut all = true;
    if wanted(1) {
        all &= report(1, "gradient verification", &gradients());
    }
    if wanted(2) {
        all &= report(2, "point-mask oracle", &point_masks());
    }
    if wanted(3) {
        all &= report(3, "metric oracles", &metric_oracles());
    }
    if wanted(4) {
        all &= report(4, "loss closed forms", &closed_forms());
    }
    let mut trained = None;
    if wanted(5) || wanted(6) || wanted(7) {
        match end_to_end_binary() {
            Ok((outcome, t)) => {
                if wanted(5) {
                    all &= report(5, "end-to-end binary", &outcome);
                }
                trained = Some(t);
            }
            Err(e) => {
                all &= report(5, "end-to-end binary", &Err(e.clone()));
            }
        }
        if let Some(t) = &trained {
            if wanted(6) {
                all &= report(6, "end-to-end multi-source", &end_to_end_multi(t));
            }
            if wanted(7) {
                all &= report(7, "ablation", &ablation(t));
            }
        } else {
            for (n, name) in [(6, "end-to-end multi-source"), (7, "ablation")] {
                if wanted(n) {
                    all &= report(n, name, &Err("no trained model".into()));
                }
            }
        }
    }
    if wanted(8) {
        all &= report(8, "pipeline contracts", &contracts(trained.as_ref()));
    }
    if !all {
        std::process::exit(1);
    }
}
