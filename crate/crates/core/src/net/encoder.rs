//! Stride-2 convolution stack, channels-last layout.

use super::{highpass_plane, silu, ModelParams, CONV_CHANNELS, EMBED_DIM, G, HIGHPASS_CUTOFF, HIGHPASS_GAIN, INPUT_CHANNELS};
use crate::error::{Error, Result};
use crate::types::{EmbeddingGrid, Image, K};

/// Four-channel encoder input: centered RGB plus scaled high-pass luminance.
pub fn encoder_input(img: &Image) -> Result<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    let hp = highpass_plane(&img.luminance(), h, w, HIGHPASS_CUTOFF)?;
    let mut out = Vec::with_capacity(h * w * INPUT_CHANNELS);
    for (p, px) in img.data().chunks_exact(3).enumerate() {
        out.extend(px.iter().map(|&v| v as f64 - 0.5));
        out.push(HIGHPASS_GAIN * hp[p]);
    }
    Ok(out)
}

pub fn encode_image(params: &ModelParams, img: &Image) -> Result<EmbeddingGrid> {
    check_dims(img)?;
    let input = encoder_input(img)?;
    let cache = encoder_forward(params, input, img.height(), img.width());
    cache.grid()
}

pub(crate) fn check_dims(img: &Image) -> Result<()> {
    if img.height() % K != 0 || img.width() % K != 0 {
        return Err(Error::Argument(format!(
            "image is {}x{}; both sides must be multiples of {K} (pad before encoding)",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub(crate) struct LayerCache {
    input: Vec<f64>,
    h: usize,
    w: usize,
    /// Pre-activation output.
    pre: Vec<f64>,
}

pub(crate) struct EncoderCache {
    layers: Vec<LayerCache>,
    pub(crate) out_h: usize,
    pub(crate) out_w: usize,
    pub(crate) output: Vec<f64>,
}

impl EncoderCache {
    pub(crate) fn grid(&self) -> Result<EmbeddingGrid> {
        EmbeddingGrid::new(EMBED_DIM, self.out_h, self.out_w, self.output.clone())
    }
}

const WEIGHTS: [G; 3] = [G::Conv1W, G::Conv2W, G::Conv3W];
const BIASES: [G; 3] = [G::Conv1B, G::Conv2B, G::Conv3B];

pub(crate) fn encoder_forward(params: &ModelParams, input: Vec<f64>, h: usize, w: usize) -> EncoderCache {
    let mut layers = Vec::with_capacity(3);
    let (mut x, mut h, mut w) = (input, h, w);
    for (l, &(cin, cout)) in CONV_CHANNELS.iter().enumerate() {
        let (pre, ho, wo) = conv_forward(&x, h, w, cin, params.slice(WEIGHTS[l]), params.slice(BIASES[l]), cout);
        let next = if l + 1 < CONV_CHANNELS.len() {
            pre.iter().map(|&z| silu(z).0).collect()
        } else {
            pre.clone()
        };
        layers.push(LayerCache { input: x, h, w, pre });
        x = next;
        h = ho;
        w = wo;
    }
    EncoderCache {
        layers,
        out_h: h,
        out_w: w,
        output: x,
    }
}

/// Accumulates encoder parameter gradients for `d_output` (gradient w.r.t. embeddings).
pub(crate) fn encoder_backward(params: &ModelParams, cache: &EncoderCache, d_output: &[f64], grads: &mut [f64]) {
    let mut d = d_output.to_vec();
    for l in (0..CONV_CHANNELS.len()).rev() {
        let layer = &cache.layers[l];
        let (cin, cout) = CONV_CHANNELS[l];
        if l + 1 < CONV_CHANNELS.len() {
            for (g, &z) in d.iter_mut().zip(&layer.pre) {
                *g *= silu(z).1;
            }
        }
        let (wr, br) = (params.range(WEIGHTS[l]), params.range(BIASES[l]));
        let (dw, db) = {
            let (lo, hi) = grads.split_at_mut(br.start);
            (&mut lo[wr.start..wr.end], &mut hi[..br.len()])
        };
        let d_input = conv_backward(
            &layer.input,
            layer.h,
            layer.w,
            cin,
            params.slice(WEIGHTS[l]),
            cout,
            &d,
            dw,
            db,
            l > 0,
        );
        if let Some(di) = d_input {
            d = di;
        }
    }
}

#[inline]
fn out_dim(n: usize) -> usize {
    (n + 1) / 2
}

/// 3×3 stride-2 convolution with zero padding 1. Weights are `[ky][kx][cin][cout]`.
pub(crate) fn conv_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
) -> (Vec<f64>, usize, usize) {
    match (cin, cout) {
        (4, 16) => conv_forward_k::<4, 16>(input, h, w, weight, bias),
        (16, 24) => conv_forward_k::<16, 24>(input, h, w, weight, bias),
        (24, 16) => conv_forward_k::<24, 16>(input, h, w, weight, bias),
        _ => unreachable!("encoder has no {cin}->{cout} convolution"),
    }
}

/// Valid kernel taps for output coordinate `o` along an axis of length `n`.
#[inline]
fn taps(o: usize, n: usize) -> std::ops::Range<usize> {
    let lo = if o == 0 { 1 } else { 0 };
    let hi = if 2 * o + 1 >= n { 3 - (2 * o + 2 - n) } else { 3 };
    lo..hi
}

fn conv_forward_k<const CI: usize, const CO: usize>(
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (out_dim(h), out_dim(w));
    let mut out = vec![0.0; ho * wo * CO];
    let bias: [f64; CO] = bias.try_into().expect("bias length");
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = bias;
            for ky in taps(oy, h) {
                let iy = 2 * oy + ky - 1;
                for kx in taps(ox, w) {
                    let ix = 2 * ox + kx - 1;
                    let base = (iy * w + ix) * CI;
                    let inp: &[f64; CI] = input[base..base + CI].try_into().unwrap();
                    let k = ky * 3 + kx;
                    let wk = &weight[k * CI * CO..(k + 1) * CI * CO];
                    for ci in 0..CI {
                        let a = inp[ci];
                        let wrow: &[f64; CO] = wk[ci * CO..(ci + 1) * CO].try_into().unwrap();
                        for co in 0..CO {
                            acc[co] += a * wrow[co];
                        }
                    }
                }
            }
            out[(oy * wo + ox) * CO..(oy * wo + ox + 1) * CO].copy_from_slice(&acc);
        }
    }
    (out, ho, wo)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    cout: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    match (cin, cout) {
        (4, 16) => conv_backward_k::<4, 16>(input, h, w, weight, d_out, d_weight, d_bias, want_input_grad),
        (16, 24) => conv_backward_k::<16, 24>(input, h, w, weight, d_out, d_weight, d_bias, want_input_grad),
        (24, 16) => conv_backward_k::<24, 16>(input, h, w, weight, d_out, d_weight, d_bias, want_input_grad),
        _ => unreachable!("encoder has no {cin}->{cout} convolution"),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_k<const CI: usize, const CO: usize>(
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let (ho, wo) = (out_dim(h), out_dim(w));
    let mut d_input = want_input_grad.then(|| vec![0.0; h * w * CI]);
    let mut dw = vec![[[0.0f64; CO]; CI]; 9];
    let mut db = [0.0f64; CO];
    let wt: Vec<[[f64; CO]; CI]> = (0..9)
        .map(|k| std::array::from_fn(|ci| weight[(k * CI + ci) * CO..(k * CI + ci + 1) * CO].try_into().unwrap()))
        .collect();
    for oy in 0..ho {
        for ox in 0..wo {
            let d: &[f64; CO] = d_out[(oy * wo + ox) * CO..(oy * wo + ox + 1) * CO].try_into().unwrap();
            for co in 0..CO {
                db[co] += d[co];
            }
            for ky in taps(oy, h) {
                let iy = 2 * oy + ky - 1;
                for kx in taps(ox, w) {
                    let ix = 2 * ox + kx - 1;
                    let k = ky * 3 + kx;
                    let base = (iy * w + ix) * CI;
                    let inp: &[f64; CI] = input[base..base + CI].try_into().unwrap();
                    let dwk = &mut dw[k];
                    for ci in 0..CI {
                        let a = inp[ci];
                        for co in 0..CO {
                            dwk[ci][co] += a * d[co];
                        }
                    }
                    if let Some(di) = d_input.as_mut() {
                        let slot: &mut [f64; CI] = (&mut di[base..base + CI]).try_into().unwrap();
                        let wk = &wt[k];
                        for ci in 0..CI {
                            let mut s = 0.0;
                            for co in 0..CO {
                                s += wk[ci][co] * d[co];
                            }
                            slot[ci] += s;
                        }
                    }
                }
            }
        }
    }
    for (k, dwk) in dw.iter().enumerate() {
        for ci in 0..CI {
            for co in 0..CO {
                d_weight[(k * CI + ci) * CO + co] += dwk[ci][co];
            }
        }
    }
    for co in 0..CO {
        d_bias[co] += db[co];
    }
    d_input
}
