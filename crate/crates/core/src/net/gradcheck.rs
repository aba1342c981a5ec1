//! Finite-difference verification of [`loss_and_gradients`].

use super::{
    encode_image, encode_prompt, loss_and_gradients, upsample_bilinear, Batch, DecoderContext, LossSpec, Mode,
    ModelParams, PretrainItem, TrainItem,
};
use crate::error::{Error, Result};
use crate::losses::{accuracy_from_logits, downsample_partition};
use crate::maskops::{point_mask, sample_point_pairs};
use crate::synth::{generate_sample, partition_to_binary};
use crate::types::{Seed, K};
use rand::seq::SliceRandom;

/// Denominator floor for relative errors, so coordinates with vanishing
/// gradients are judged on absolute agreement.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub mode: Mode,
    pub checked: usize,
    /// Coordinates skipped because the perturbation flipped a binarized pixel
    /// (the confidence target is piecewise constant).
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

/// Compares analytic gradients to central differences with step `eps` on
/// `coords` random trainable coordinates.
pub fn gradient_check(
    params: &ModelParams,
    batch: &Batch,
    spec: &LossSpec,
    coords: usize,
    eps: f64,
    seed: Seed,
) -> Result<GradCheckReport> {
    let mode = match batch {
        Batch::Pretrain(_) => Mode::Pretrain,
        Batch::Train(_) => Mode::Train,
        Batch::Baseline(_) => Mode::Baseline,
    };
    let analytic = loss_and_gradients(params, batch, spec)?;
    if analytic.terms == 0 {
        return Err(Error::Argument("gradient check batch contributes no loss terms".into()));
    }
    let base_acc = accuracy_signature(params, batch)?;
    let mut candidates: Vec<usize> = params
        .trainable_mask(mode)
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| t.then_some(i))
        .collect();
    candidates.shuffle(&mut seed.rng());

    let mut report = GradCheckReport {
        mode,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst_index: None,
    };
    let mut probe = params.clone();
    for i in candidates {
        if report.checked == coords {
            break;
        }
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + eps;
        let plus_acc = accuracy_signature(&probe, batch)?;
        let plus = loss_and_gradients(&probe, batch, spec)?.loss;
        probe.values_mut()[i] = orig - eps;
        let minus_acc = accuracy_signature(&probe, batch)?;
        let minus = loss_and_gradients(&probe, batch, spec)?.loss;
        probe.values_mut()[i] = orig;
        if plus_acc != base_acc || minus_acc != base_acc {
            report.skipped += 1;
            continue;
        }
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic.grads[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_ERROR_FLOOR);
        if rel > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst_index = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Per-prompt pixel accuracies of `bin(x)`; empty outside train mode.
fn accuracy_signature(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let Batch::Train(items) = batch else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for item in items {
        let ctx = DecoderContext::new(params, &item.grid)?;
        for (prompt, yp) in &item.prompts {
            let pass = ctx.pass(params, Some(prompt));
            let logits = upsample_bilinear(&pass.logits, ctx.rows, ctx.cols, ctx.height(), ctx.width());
            out.push(accuracy_from_logits(&logits, yp.data())?);
        }
    }
    Ok(out)
}

/// Small seeded parameters and batch for `mode`: two 64×64 two-source images.
pub fn gradcheck_fixture(mode: Mode, seed: Seed) -> Result<(ModelParams, Batch)> {
    const SIZE: usize = 64;
    let params = ModelParams::init(seed.derive_named("gradcheck.params", 0));
    let mut samples = Vec::new();
    let mut index = 0;
    while samples.len() < 2 {
        let (image, part) = generate_sample(seed.derive_named("gradcheck.sample", index), SIZE, 2)?;
        index += 1;
        let labels = downsample_partition(&part, K)?;
        if labels.iter().any(|&l| l != labels[0]) {
            samples.push((image, part, labels));
        }
    }
    let batch = match mode {
        Mode::Pretrain => Batch::Pretrain(
            samples
                .into_iter()
                .map(|(image, _, cell_labels)| PretrainItem { image, cell_labels })
                .collect(),
        ),
        Mode::Train => Batch::Train(
            samples
                .into_iter()
                .enumerate()
                .map(|(i, (image, part, _))| {
                    let mask = partition_to_binary(&part);
                    let grid = encode_image(&params, &image)?;
                    let mut prompts = Vec::new();
                    for (a, b) in sample_point_pairs(&mask, 2, seed.derive_named("gradcheck.pairs", i as u64)) {
                        for p in [a, b] {
                            prompts.push((encode_prompt(&params, p, SIZE, SIZE)?, point_mask(&mask, p)?));
                        }
                    }
                    Ok(TrainItem { grid, prompts })
                })
                .collect::<Result<_>>()?,
        ),
        Mode::Baseline => Batch::Baseline(
            samples
                .into_iter()
                .map(|(image, part, _)| {
                    Ok(super::BaselineItem {
                        grid: encode_image(&params, &image)?,
                        mask: partition_to_binary(&part),
                    })
                })
                .collect::<Result<_>>()?,
        ),
    };
    Ok((params, batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_gradients_verify() {
        let (params, batch) = gradcheck_fixture(Mode::Baseline, Seed(5)).unwrap();
        let r = gradient_check(&params, &batch, &LossSpec::default(), 30, 1e-4, Seed(1)).unwrap();
        assert_eq!(r.checked, 30);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn train_gradients_verify() {
        let (params, batch) = gradcheck_fixture(Mode::Train, Seed(2)).unwrap();
        let r = gradient_check(&params, &batch, &LossSpec::default(), 20, 1e-4, Seed(3)).unwrap();
        assert_eq!(r.checked, 20);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn pretrain_gradients_verify() {
        let (params, batch) = gradcheck_fixture(Mode::Pretrain, Seed(2)).unwrap();
        let r = gradient_check(&params, &batch, &LossSpec::default(), 20, 1e-4, Seed(3)).unwrap();
        assert_eq!(r.checked, 20);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
