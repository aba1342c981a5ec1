//! Mask decoder: prompt-to-grid attention, per-cell scorer, confidence head,
//! bilinear upsampling.

use super::prompt::cell_positions;
use super::{silu, sigmoid, ModelParams, PromptEmbedding, ATTENTION_SHARPNESS, EMBED_DIM, G, HIDDEN};
use crate::error::{Error, Result};
use crate::types::{ConfidenceScore, EmbeddingGrid, PredictionMap, K};

const NORM_EPS: f64 = 1e-12;

/// Prompt-independent decoder state for one image: computed once, shared by all prompts.
pub(crate) struct DecoderContext {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    /// L2-normalized cell embeddings.
    pub(crate) unit: Vec<f64>,
    positions: Vec<f64>,
    /// Cell-embedding part of the hidden pre-activation, bias included.
    base: Vec<f64>,
}

/// Forward values of one prompt, kept for the backward pass.
pub(crate) struct PromptPass {
    token: Vec<f64>,
    cos: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    hidden_mean: Vec<f64>,
    pub(crate) confidence: f64,
}

impl DecoderContext {
    pub(crate) fn new(params: &ModelParams, grid: &EmbeddingGrid) -> Result<Self> {
        if grid.dim() != EMBED_DIM {
            return Err(Error::Argument(format!(
                "embedding dimension {} does not match model ({EMBED_DIM})",
                grid.dim()
            )));
        }
        let (rows, cols) = (grid.rows(), grid.cols());
        let cells = rows * cols;
        let mut unit = Vec::with_capacity(cells * EMBED_DIM);
        for c in 0..cells {
            let e = grid.cell(c);
            let n = (e.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            unit.extend(e.iter().map(|v| v / n));
        }
        let w = params.slice(G::HiddenW);
        let b = params.slice(G::HiddenB);
        let mut base = Vec::with_capacity(cells * HIDDEN);
        for u in unit.chunks_exact(EMBED_DIM) {
            let mut acc = b.to_vec();
            for (uv, wrow) in u.iter().zip(w.chunks_exact(HIDDEN)) {
                for (a, wv) in acc.iter_mut().zip(wrow) {
                    *a += uv * wv;
                }
            }
            base.extend(acc);
        }
        Ok(Self {
            rows,
            cols,
            unit,
            positions: cell_positions(params, rows, cols),
            base,
        })
    }

    pub(crate) fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub(crate) fn height(&self) -> usize {
        self.rows * K
    }

    pub(crate) fn width(&self) -> usize {
        self.cols * K
    }

    /// Attention-pooled, normalized grid token for a prompt.
    fn token(&self, prompt: &PromptEmbedding) -> Vec<f64> {
        let scores: Vec<f64> = self
            .positions
            .chunks_exact(EMBED_DIM)
            .map(|pe| ATTENTION_SHARPNESS * pe.iter().zip(&prompt.0).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut t = vec![0.0; EMBED_DIM];
        for (wgt, u) in weights.iter().zip(self.unit.chunks_exact(EMBED_DIM)) {
            let a = wgt / total;
            for (tv, uv) in t.iter_mut().zip(u) {
                *tv += a * uv;
            }
        }
        let n = (t.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        t.iter_mut().for_each(|v| *v /= n);
        t
    }

    /// Scores every cell for `prompt`; `None` runs the unprompted baseline head.
    pub(crate) fn pass(&self, params: &ModelParams, prompt: Option<&PromptEmbedding>) -> PromptPass {
        let cells = self.cells();
        let w = params.slice(G::HiddenW);
        let (token, cos) = match prompt {
            Some(p) => {
                let t = self.token(p);
                let cos = self
                    .unit
                    .chunks_exact(EMBED_DIM)
                    .map(|u| u.iter().zip(&t).map(|(a, b)| a * b).sum())
                    .collect();
                (t, cos)
            }
            None => (vec![0.0; EMBED_DIM], vec![0.0; cells]),
        };
        // Token contribution is shared by every cell.
        let mut shared = vec![0.0; HIDDEN];
        for (tv, wrow) in token.iter().zip(w[EMBED_DIM * HIDDEN..2 * EMBED_DIM * HIDDEN].chunks_exact(HIDDEN)) {
            for (s, wv) in shared.iter_mut().zip(wrow) {
                *s += tv * wv;
            }
        }
        let w_cos = &w[2 * EMBED_DIM * HIDDEN..];
        let w_out = params.slice(G::OutW);
        let b_out = params.slice(G::OutB)[0];
        let mut pre = Vec::with_capacity(cells * HIDDEN);
        let mut hidden = Vec::with_capacity(cells * HIDDEN);
        let mut logits = Vec::with_capacity(cells);
        let mut hidden_mean = vec![0.0; HIDDEN];
        for (c, base) in self.base.chunks_exact(HIDDEN).enumerate() {
            let mut logit = b_out;
            for j in 0..HIDDEN {
                let z = base[j] + shared[j] + cos[c] * w_cos[j];
                let a = silu(z).0;
                pre.push(z);
                hidden.push(a);
                hidden_mean[j] += a;
                logit += w_out[j] * a;
            }
            logits.push(logit);
        }
        hidden_mean.iter_mut().for_each(|v| *v /= cells as f64);
        let conf_logit = params.slice(G::ConfB)[0]
            + params
                .slice(G::ConfW)
                .iter()
                .zip(&hidden_mean)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        PromptPass {
            token,
            cos,
            pre,
            hidden,
            logits,
            hidden_mean,
            confidence: sigmoid(conf_logit),
        }
    }

    /// Accumulates decoder gradients for one pass. The cell-embedding part of the
    /// hidden layer is collected in `d_pre_total` and applied by [`Self::finish_backward`].
    pub(crate) fn backward(
        &self,
        params: &ModelParams,
        pass: &PromptPass,
        d_logits: &[f64],
        d_confidence: f64,
        grads: &mut [f64],
        d_pre_total: &mut [f64],
    ) {
        let cells = self.cells();
        let w_out = params.slice(G::OutW);
        let w_conf = params.slice(G::ConfW);
        let s = pass.confidence;
        let d_conf_logit = d_confidence * s * (1.0 - s);

        let conf_w = params.range(G::ConfW);
        for (g, h) in grads[conf_w].iter_mut().zip(&pass.hidden_mean) {
            *g += d_conf_logit * h;
        }
        grads[params.range(G::ConfB).start] += d_conf_logit;
        let d_mean: Vec<f64> = w_conf.iter().map(|w| d_conf_logit * w / cells as f64).collect();

        let out_w = params.range(G::OutW);
        let mut d_out_w = vec![0.0; HIDDEN];
        let mut d_out_b = 0.0;
        let mut d_token_w = vec![0.0; HIDDEN];
        let mut d_cos_w = vec![0.0; HIDDEN];
        for c in 0..cells {
            let dl = d_logits[c];
            d_out_b += dl;
            let row = c * HIDDEN..(c + 1) * HIDDEN;
            let (pre, hidden) = (&pass.pre[row.clone()], &pass.hidden[row.clone()]);
            let dp = &mut d_pre_total[row];
            for j in 0..HIDDEN {
                d_out_w[j] += dl * hidden[j];
                let dh = dl * w_out[j] + d_mean[j];
                let dz = dh * silu(pre[j]).1;
                dp[j] += dz;
                d_token_w[j] += dz;
                d_cos_w[j] += dz * pass.cos[c];
            }
        }
        for (g, d) in grads[out_w].iter_mut().zip(&d_out_w) {
            *g += d;
        }
        grads[params.range(G::OutB).start] += d_out_b;

        let hw = params.range(G::HiddenW);
        let hidden_w = &mut grads[hw];
        for (v, tv) in pass.token.iter().enumerate() {
            let row = &mut hidden_w[(EMBED_DIM + v) * HIDDEN..(EMBED_DIM + v + 1) * HIDDEN];
            for (g, d) in row.iter_mut().zip(&d_token_w) {
                *g += tv * d;
            }
        }
        for (g, d) in hidden_w[2 * EMBED_DIM * HIDDEN..].iter_mut().zip(&d_cos_w) {
            *g += d;
        }
    }

    pub(crate) fn finish_backward(&self, params: &ModelParams, d_pre_total: &[f64], grads: &mut [f64]) {
        let hw = params.range(G::HiddenW);
        let hb = params.range(G::HiddenB);
        for (u, dp) in self.unit.chunks_exact(EMBED_DIM).zip(d_pre_total.chunks_exact(HIDDEN)) {
            for (g, d) in grads[hb.clone()].iter_mut().zip(dp) {
                *g += d;
            }
            let w = &mut grads[hw.start..hw.start + EMBED_DIM * HIDDEN];
            for (uv, row) in u.iter().zip(w.chunks_exact_mut(HIDDEN)) {
                for (g, d) in row.iter_mut().zip(dp) {
                    *g += uv * d;
                }
            }
        }
    }
}

/// Decodes every prompt against one embedding grid. Output order follows input order.
pub fn decode(
    params: &ModelParams,
    grid: &EmbeddingGrid,
    prompts: &[PromptEmbedding],
) -> Result<Vec<(PredictionMap, ConfidenceScore)>> {
    if prompts.is_empty() {
        return Err(Error::Argument("decode needs at least one prompt".into()));
    }
    let ctx = DecoderContext::new(params, grid)?;
    prompts
        .iter()
        .map(|p| {
            let pass = ctx.pass(params, Some(p));
            let map = to_prediction(&ctx, &pass.logits)?;
            Ok((map, ConfidenceScore::new(pass.confidence)?))
        })
        .collect()
}

/// Unprompted decoder output, used by the binary-segmentation ablation.
pub fn decode_baseline(params: &ModelParams, grid: &EmbeddingGrid) -> Result<PredictionMap> {
    let ctx = DecoderContext::new(params, grid)?;
    let pass = ctx.pass(params, None);
    to_prediction(&ctx, &pass.logits)
}

fn to_prediction(ctx: &DecoderContext, logits: &[f64]) -> Result<PredictionMap> {
    let (h, w) = (ctx.height(), ctx.width());
    let up = upsample_bilinear(logits, ctx.rows, ctx.cols, h, w);
    PredictionMap::new(h, w, up.into_iter().map(|v| v as f32).collect())
}

/// Linear interpolation taps `(i0, i1, t)` mapping `n_out` samples onto `n_in`,
/// half-pixel centers, clamped at the borders.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else if src >= (n_in - 1) as f64 {
                (n_in - 1, n_in - 1, 0.0)
            } else {
                let i0 = src.floor() as usize;
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

/// Separable bilinear resampling of a `rows`×`cols` map to `out_h`×`out_w`.
pub fn upsample_bilinear(values: &[f64], rows: usize, cols: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    resample(values, rows, cols, out_h, out_w)
}

/// Bilinear sampling of a full-resolution map at the centers of a `rows`×`cols` grid.
pub fn downsample_bilinear(values: &[f64], h: usize, w: usize, rows: usize, cols: usize) -> Vec<f64> {
    resample(values, h, w, rows, cols)
}

fn resample(values: &[f64], rows: usize, cols: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ty = axis_taps(rows, out_h);
    let tx = axis_taps(cols, out_w);
    let mut tmp = vec![0.0; rows * out_w];
    for r in 0..rows {
        let src = &values[r * cols..(r + 1) * cols];
        for (x, &(i0, i1, t)) in tx.iter().enumerate() {
            tmp[r * out_w + x] = (1.0 - t) * src[i0] + t * src[i1];
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for (y, &(i0, i1, t)) in ty.iter().enumerate() {
        let (a, b) = (&tmp[i0 * out_w..(i0 + 1) * out_w], &tmp[i1 * out_w..(i1 + 1) * out_w]);
        for ((o, av), bv) in out[y * out_w..(y + 1) * out_w].iter_mut().zip(a).zip(b) {
            *o = (1.0 - t) * av + t * bv;
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub(crate) fn upsample_backward(d_out: &[f64], rows: usize, cols: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let ty = axis_taps(rows, out_h);
    let tx = axis_taps(cols, out_w);
    let mut d_tmp = vec![0.0; rows * out_w];
    for (y, &(i0, i1, t)) in ty.iter().enumerate() {
        let src = &d_out[y * out_w..(y + 1) * out_w];
        for (x, g) in src.iter().enumerate() {
            d_tmp[i0 * out_w + x] += (1.0 - t) * g;
            d_tmp[i1 * out_w + x] += t * g;
        }
    }
    let mut d = vec![0.0; rows * cols];
    for r in 0..rows {
        for (x, &(i0, i1, t)) in tx.iter().enumerate() {
            let g = d_tmp[r * out_w + x];
            d[r * cols + i0] += (1.0 - t) * g;
            d[r * cols + i1] += t * g;
        }
    }
    d
}
