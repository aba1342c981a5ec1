//! Scalar training objectives over a batch and their analytic gradients.

use super::decoder::upsample_backward;
use super::{encoder_backward, encoder_forward, encoder_input, upsample_bilinear, DecoderContext, ModelParams, PromptEmbedding, HIDDEN};
use crate::error::{Error, Result};
use crate::losses::{accuracy_from_logits, aass_loss_grad, bce_grad, r2r_loss_grad, LossConfig};
use crate::types::{BinaryMask, EmbeddingGrid, Image, PointMask};
use rayon::prelude::*;

/// Pretraining sample: an image and one source label per encoder cell.
#[derive(Clone, Debug)]
pub struct PretrainItem {
    pub image: Image,
    pub cell_labels: Vec<u8>,
}

/// Training sample. `grid` is the frozen encoder's output for the image.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub grid: EmbeddingGrid,
    pub prompts: Vec<(PromptEmbedding, PointMask)>,
}

/// Unprompted binary segmentation sample.
#[derive(Clone, Debug)]
pub struct BaselineItem {
    pub grid: EmbeddingGrid,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug)]
pub enum Batch {
    Pretrain(Vec<PretrainItem>),
    Train(Vec<TrainItem>),
    Baseline(Vec<BaselineItem>),
}

pub type LossSpec = LossConfig;

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Mean pixel accuracy of `bin(x)` against the targets (train and baseline modes).
    pub accuracy: Option<f64>,
    /// Number of terms averaged into `loss`; 0 when every item was skipped.
    pub terms: usize,
}

struct Term {
    loss: f64,
    grads: Vec<f64>,
    accuracy: f64,
    count: usize,
}

/// Mean loss over the batch and its gradient w.r.t. every parameter.
/// Groups outside the batch's mode receive exactly zero gradient.
pub fn loss_and_gradients(params: &ModelParams, batch: &Batch, spec: &LossSpec) -> Result<LossOutput> {
    let terms: Vec<Option<Term>> = match batch {
        Batch::Pretrain(items) => items
            .par_iter()
            .map(|item| pretrain_term(params, item, spec))
            .collect::<Result<_>>()?,
        Batch::Train(items) => items
            .par_iter()
            .map(|item| train_term(params, item, spec).map(Some))
            .collect::<Result<_>>()?,
        Batch::Baseline(items) => items
            .par_iter()
            .map(|item| baseline_term(params, item).map(Some))
            .collect::<Result<_>>()?,
    };
    // Ordered reduction keeps results independent of thread scheduling.
    let mut grads = vec![0.0; params.len()];
    let (mut loss, mut acc, mut count) = (0.0, 0.0, 0usize);
    for t in terms.into_iter().flatten() {
        loss += t.loss;
        acc += t.accuracy;
        count += t.count;
        for (g, v) in grads.iter_mut().zip(&t.grads) {
            *g += v;
        }
    }
    if count > 0 {
        let scale = 1.0 / count as f64;
        loss *= scale;
        acc *= scale;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    check_finite(params, loss, &grads)?;
    Ok(LossOutput {
        loss,
        grads,
        accuracy: (count > 0 && !matches!(batch, Batch::Pretrain(_))).then_some(acc),
        terms: count,
    })
}

fn check_finite(params: &ModelParams, loss: f64, grads: &[f64]) -> Result<()> {
    let mut bad: Vec<&str> = params
        .groups()
        .iter()
        .filter(|g| grads[g.range()].iter().any(|v| !v.is_finite()))
        .map(|g| g.name)
        .collect();
    bad.dedup();
    if !loss.is_finite() || !bad.is_empty() {
        return Err(Error::Numerical(format!(
            "non-finite loss ({loss}) or gradients in groups [{}]",
            bad.join(", ")
        )));
    }
    Ok(())
}

fn pretrain_term(params: &ModelParams, item: &PretrainItem, spec: &LossSpec) -> Result<Option<Term>> {
    super::encoder::check_dims(&item.image)?;
    let (h, w) = (item.image.height(), item.image.width());
    let cache = encoder_forward(params, encoder_input(&item.image)?, h, w);
    if item.cell_labels.len() != cache.out_h * cache.out_w {
        return Err(Error::ShapeMismatch {
            left: format!("{}x{} cells", cache.out_h, cache.out_w),
            right: format!("{} labels", item.cell_labels.len()),
        });
    }
    let dim = super::EMBED_DIM;
    let Some((loss, d_emb)) = r2r_loss_grad(&cache.output, dim, &item.cell_labels, spec.tau, spec.normalize_embeddings)
    else {
        return Ok(None);
    };
    let mut grads = vec![0.0; params.len()];
    encoder_backward(params, &cache, &d_emb, &mut grads);
    Ok(Some(Term {
        loss,
        grads,
        accuracy: 0.0,
        count: 1,
    }))
}

fn train_term(params: &ModelParams, item: &TrainItem, spec: &LossSpec) -> Result<Term> {
    let ctx = DecoderContext::new(params, &item.grid)?;
    let (h, w) = (ctx.height(), ctx.width());
    let mut grads = vec![0.0; params.len()];
    let mut d_pre = vec![0.0; ctx.cells() * HIDDEN];
    let (mut loss, mut acc) = (0.0, 0.0);
    for (prompt, yp) in &item.prompts {
        if (yp.height(), yp.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                left: format!("decoder output {h}x{w}"),
                right: format!("point mask {}x{}", yp.height(), yp.width()),
            });
        }
        let pass = ctx.pass(params, Some(prompt));
        let logits = upsample_bilinear(&pass.logits, ctx.rows, ctx.cols, h, w);
        let (aass, d_logits) = aass_loss_grad(&logits, yp.data(), spec.c_max)?;
        let a = accuracy_from_logits(&logits, yp.data())?;
        let s = pass.confidence;
        loss += aass + spec.lambda_conf * (a - s).powi(2);
        acc += a;
        let d_cells = upsample_backward(&d_logits, ctx.rows, ctx.cols, h, w);
        let d_conf = spec.lambda_conf * 2.0 * (s - a);
        ctx.backward(params, &pass, &d_cells, d_conf, &mut grads, &mut d_pre);
    }
    ctx.finish_backward(params, &d_pre, &mut grads);
    Ok(Term {
        loss,
        grads,
        accuracy: acc,
        count: item.prompts.len(),
    })
}

fn baseline_term(params: &ModelParams, item: &BaselineItem) -> Result<Term> {
    let ctx = DecoderContext::new(params, &item.grid)?;
    let (h, w) = (ctx.height(), ctx.width());
    if (item.mask.height(), item.mask.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            left: format!("decoder output {h}x{w}"),
            right: format!("mask {}x{}", item.mask.height(), item.mask.width()),
        });
    }
    let pass = ctx.pass(params, None);
    let logits = upsample_bilinear(&pass.logits, ctx.rows, ctx.cols, h, w);
    let (loss, d_logits) = bce_grad(&logits, item.mask.data());
    let labels: Vec<i8> = item.mask.data().iter().map(|&v| v as i8).collect();
    let acc = accuracy_from_logits(&logits, &labels)?;
    let mut grads = vec![0.0; params.len()];
    let mut d_pre = vec![0.0; ctx.cells() * HIDDEN];
    let d_cells = upsample_backward(&d_logits, ctx.rows, ctx.cols, h, w);
    ctx.backward(params, &pass, &d_cells, 0.0, &mut grads, &mut d_pre);
    ctx.finish_backward(params, &d_pre, &mut grads);
    Ok(Term {
        loss,
        grads,
        accuracy: acc,
        count: 1,
    })
}
