use crate::config::{self, Loaded};
use crate::{
    ClusterArg, Command, Common, EvalArgs, GenArgs, GradMode, GradcheckArgs, InferArgs, MetricArg, ModeArg,
    PretrainArgs, RobustnessArgs, TrainArgs, TransformArg,
};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use safire::dataset::{load_dataset, png_names};
use safire::inference::{infer, infer_baseline, ClusterMethod, InferMode, InferOptions};
use safire::io::{read_image, write_gray_png, write_heatmap, write_partition_png};
use safire::losses::LossConfig;
use safire::metrics::{evaluate_dirs, robustness_report, write_eval_csv, write_robustness_csv, EvalMetric, TransformKind};
use safire::net::{gradcheck_fixture, gradient_check, load_checkpoint, save_checkpoint, Mode};
use safire::synth::{generate_dataset, SignatureConfig, SourceRange, SynthConfig};
use safire::trainer::{pretrain, pretrain_from, train, train_baseline, train_from, write_log_csv, PretrainConfig, TrainConfig};
use safire::{Heatmap, Seed, SourcePartition};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Invalid flag combinations detected after parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<safire::Error>() {
        Some(safire::Error::Argument(_)) => 1,
        Some(safire::Error::Numerical(_)) => 3,
        _ => 2,
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Robustness(a) => robustness_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

/// Loads the config file, resolves seed and thread count, and sizes the
/// global thread pool.
fn setup<T: serde::de::DeserializeOwned + Default>(common: &Common) -> Result<(T, Seed)> {
    let Loaded { value, seed, jobs } = config::load::<T>(common.config.as_deref())?;
    let jobs = common.jobs.or(jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .context("starting worker threads")?;
    Ok((value, Seed(common.seed.or(seed).unwrap_or(0))))
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenConfig {
    count: usize,
    size: usize,
    sources: SourceRange,
    synth: SynthConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 100,
            size: 256,
            sources: SourceRange::fixed(2),
            synth: SynthConfig::default(),
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let (mut cfg, seed) = setup::<GenConfig>(&a.common)?;
    set(&mut cfg.count, a.count);
    set(&mut cfg.size, a.size);
    if let Some(n) = a.sources {
        cfg.sources = SourceRange::fixed(n);
    }
    set(&mut cfg.sources.max, a.max_sources);
    if a.strong {
        cfg.synth.signatures = SignatureConfig::strong();
    }
    let manifest = generate_dataset(&a.out, &cfg.synth, seed, cfg.count, cfg.size, cfg.sources)?;
    println!("wrote {} images to {}", manifest.samples.len(), a.out.display());
    Ok(())
}

fn log_path(out: &Path, log: Option<PathBuf>) -> PathBuf {
    log.unwrap_or_else(|| out.with_extension("csv"))
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let (mut cfg, seed) = setup::<PretrainConfig>(&a.common)?;
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.batch_size, a.batch_size);
    let data = load_dataset(&a.data)?;
    let outcome = match &a.resume {
        Some(path) => pretrain_from(&cfg, &data, load_checkpoint(path)?, seed)?,
        None => pretrain(&cfg, &data, seed)?,
    };
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    write_log_csv(&outcome.log, &log_path(&a.out, a.log))?;
    if let Some(last) = outcome.log.last() {
        println!("epoch {} loss {:.6}", last.epoch, last.loss);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (mut cfg, seed) = setup::<TrainConfig>(&a.common)?;
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.lr, a.lr);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.pairs_per_image, a.pairs);
    let data = load_dataset(&a.data)?;
    let outcome = match (&a.resume, &a.init) {
        (Some(path), _) => train_from(&cfg, &data, load_checkpoint(path)?, seed)?,
        (None, Some(init)) => {
            let pretrained = load_checkpoint(init)?.params;
            if a.baseline {
                train_baseline(&cfg, &data, &pretrained, seed)?
            } else {
                train(&cfg, &data, &pretrained, seed)?
            }
        }
        (None, None) => return Err(UsageError("train needs --init or --resume".into()).into()),
    };
    save_checkpoint(&outcome.checkpoint, &a.out)?;
    write_log_csv(&outcome.log, &log_path(&a.out, a.log))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {} loss {:.6} acc {:.4}",
            last.epoch,
            last.loss,
            last.acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

/// What `infer` records next to each prediction.
#[derive(Debug, Serialize)]
struct Sidecar {
    image: String,
    mode: &'static str,
    m: usize,
    cluster: Option<ClusterMethod>,
    cluster_sizes: Vec<usize>,
    /// Prompt index chosen for each cluster.
    selected: Vec<usize>,
    /// `[row, col]` of every grid prompt.
    prompts: Vec<[usize; 2]>,
    confidences: Vec<f64>,
    fallback: Vec<bool>,
}

fn infer_options(mut opts: InferOptions, a: &InferArgs, seed: Seed) -> InferOptions {
    set(&mut opts.grid, a.grid);
    if let Some(m) = a.mode {
        opts.mode = match m {
            ModeArg::Binary => InferMode::Binary,
            ModeArg::Multi => InferMode::Multi,
        };
    }
    if let Some(c) = a.cluster {
        opts.cluster = match c {
            ClusterArg::Kmeans => ClusterMethod::Kmeans,
            ClusterArg::Dbscan => ClusterMethod::Dbscan,
        };
    }
    if a.m.is_some() {
        opts.m = a.m;
    }
    set(&mut opts.eps, a.eps);
    set(&mut opts.min_pts, a.min_pts);
    opts.seed = seed.0;
    opts
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let (opts, seed) = setup::<InferOptions>(&a.common)?;
    let opts = infer_options(opts, &a, seed);
    let params = load_checkpoint(&a.ckpt)?.params;
    let inputs: Vec<PathBuf> = if a.image.is_dir() {
        png_names(&a.image)?.into_iter().map(|n| a.image.join(n)).collect()
    } else {
        vec![a.image.clone()]
    };
    if inputs.is_empty() {
        return Err(safire::Error::Config(format!("no PNG images in {}", a.image.display())).into());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| safire::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    inputs
        .par_iter()
        .map(|path| -> Result<()> {
            let image = read_image(path)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let sidecar = if a.baseline {
                let heatmap = infer_baseline(&params, &image)?;
                write_outputs(&a.out, &stem, Some(&heatmap), &binarized(&heatmap)?)?;
                Sidecar {
                    image: path.display().to_string(),
                    mode: "baseline",
                    m: 1,
                    cluster: None,
                    cluster_sizes: Vec::new(),
                    selected: Vec::new(),
                    prompts: Vec::new(),
                    confidences: Vec::new(),
                    fallback: Vec::new(),
                }
            } else {
                let out = infer(&params, &image, &opts).with_context(|| path.display().to_string())?;
                write_outputs(&a.out, &stem, out.heatmap.as_ref(), &out.partition)?;
                Sidecar {
                    image: path.display().to_string(),
                    mode: match opts.mode {
                        InferMode::Binary => "binary",
                        InferMode::Multi => "multi",
                    },
                    m: out.m(),
                    cluster: Some(out.assignment.method),
                    cluster_sizes: out.assignment.sizes(),
                    selected: out.selected.clone(),
                    prompts: out.prompts.iter().map(|p| [p.row, p.col]).collect(),
                    confidences: out.confidences.clone(),
                    fallback: out.fallback.clone(),
                }
            };
            let json = serde_json::to_vec_pretty(&sidecar)?;
            let dest = a.out.join(format!("{stem}.json"));
            std::fs::write(&dest, json).map_err(|e| safire::Error::Io { path: dest, source: e })?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    println!("wrote predictions for {} images to {}", inputs.len(), a.out.display());
    Ok(())
}

fn binarized(map: &Heatmap) -> Result<SourcePartition> {
    let labels: Vec<u32> = map.data().iter().map(|&v| u32::from(v > 0.5)).collect();
    Ok(SourcePartition::compacted(map.height(), map.width(), &labels)?)
}

fn write_outputs(dir: &Path, stem: &str, heatmap: Option<&Heatmap>, partition: &SourcePartition) -> Result<()> {
    if let Some(h) = heatmap {
        write_heatmap(h, &dir.join(format!("{stem}.safr")))?;
        write_gray_png(h.height(), h.width(), h.data(), &dir.join(format!("{stem}.heatmap.png")))?;
    }
    write_partition_png(partition, &dir.join(format!("{stem}.partition.png")))?;
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    metric: Option<EvalMetricName>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EvalMetricName {
    F1Fixed,
    F1Best,
    Pmiou,
    Ari,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (cfg, _) = setup::<EvalConfig>(&a.common)?;
    let metric = match (a.metric, cfg.metric) {
        (Some(MetricArg::F1Fixed), _) | (None, Some(EvalMetricName::F1Fixed)) => EvalMetric::F1Fixed,
        (Some(MetricArg::F1Best), _) | (None, Some(EvalMetricName::F1Best)) => EvalMetric::F1Best,
        (Some(MetricArg::Pmiou), _) | (None, Some(EvalMetricName::Pmiou)) => EvalMetric::Pmiou,
        (Some(MetricArg::Ari), _) | (None, Some(EvalMetricName::Ari)) => EvalMetric::Ari,
        (None, None) => return Err(UsageError("eval needs --metric".into()).into()),
    };
    let scores = evaluate_dirs(&a.pred, &a.gt, metric)?;
    write_eval_csv(metric, &scores, &a.out)?;
    let mean = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
    println!("{} mean {mean:.6} over {} images", metric.name(), scores.len());
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RobustnessConfig {
    transform: Option<TransformKind>,
    levels: Option<Vec<f64>>,
    infer: InferOptions,
}

/// Sweep used when no levels are given; the first level is the identity.
fn default_levels(kind: TransformKind) -> Vec<f64> {
    match kind {
        TransformKind::Blur => vec![0.0, 0.5, 1.0, 2.0],
        TransformKind::Noise => vec![0.0, 0.01, 0.02, 0.05],
        TransformKind::Jpeg => vec![100.0, 90.0, 70.0, 50.0],
        TransformKind::Gamma => vec![1.0, 0.8, 1.25, 1.5],
    }
}

fn robustness_cmd(a: RobustnessArgs) -> Result<()> {
    let (cfg, seed) = setup::<RobustnessConfig>(&a.common)?;
    let kind = match a.transform {
        Some(TransformArg::Blur) => TransformKind::Blur,
        Some(TransformArg::Noise) => TransformKind::Noise,
        Some(TransformArg::Jpeg) => TransformKind::Jpeg,
        Some(TransformArg::Gamma) => TransformKind::Gamma,
        None => cfg
            .transform
            .ok_or_else(|| UsageError("robustness needs --transform".into()))?,
    };
    let levels = a.levels.or(cfg.levels).unwrap_or_else(|| default_levels(kind));
    if levels.is_empty() {
        bail!(UsageError("no levels given".into()));
    }
    let mut opts = cfg.infer;
    set(&mut opts.grid, a.grid);
    opts.seed = seed.0;
    let params = load_checkpoint(&a.ckpt)?.params;
    let data = load_dataset(&a.data)?;
    let rows = robustness_report(&params, &data, kind, &levels, &opts, seed)?;
    write_robustness_csv(&rows, &a.out)?;
    for r in &rows {
        println!("{} {} {:.6} ({} images)", r.transform, r.level, r.score, r.n_images);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckConfig {
    coords: usize,
    eps: f64,
    loss: LossConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            coords: 100,
            eps: 1e-4,
            loss: LossConfig::default(),
        }
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let (mut cfg, seed) = setup::<GradcheckConfig>(&a.common)?;
    set(&mut cfg.coords, a.coords);
    set(&mut cfg.eps, a.eps);
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        bail!(UsageError(format!("eps must be positive, got {}", cfg.eps)));
    }
    let modes: &[Mode] = match a.mode.unwrap_or(GradMode::All) {
        GradMode::All => &[Mode::Pretrain, Mode::Train],
        GradMode::Pretrain => &[Mode::Pretrain],
        GradMode::Train => &[Mode::Train],
        GradMode::Baseline => &[Mode::Baseline],
    };
    let mut worst: f64 = 0.0;
    for (i, &mode) in modes.iter().enumerate() {
        let (params, batch) = gradcheck_fixture(mode, seed)?;
        let report = gradient_check(&params, &batch, &cfg.loss, cfg.coords, cfg.eps, seed.derive_named("gradcheck.coords", i as u64))?;
        println!(
            "{mode:?}: {} coordinates checked, {} skipped, max relative error {:.3e}",
            report.checked, report.skipped, report.max_rel_error
        );
        worst = worst.max(report.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if !(worst < GRADCHECK_TOLERANCE) {
        return Err(safire::Error::Numerical(format!(
            "gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}"
        ))
        .into());
    }
    Ok(())
}
