//! The toy promptable segmentation model.
//!
//! * image encoder: RGB plus a high-pass luminance channel through three
//!   stride-2 3×3 convolutions (4→16→24→16), giving one 16-d embedding per
//!   8×8 pixel cell;
//! * prompt encoder: frozen random Fourier features of the point position;
//! * mask decoder: the prompt token attends to the grid through the same
//!   positional features, then a per-cell perceptron scores every cell
//!   against the token; logits are upsampled bilinearly to full resolution.
//!   A confidence head reads the mean hidden activation.
//!
//! Parameters live in one flat `f64` vector addressed through named groups.
//! Trainers keep values on the `f32` grid so checkpoints round-trip exactly.

mod checkpoint;
mod decoder;
mod encoder;
mod gradcheck;
mod highpass;
mod prompt;
mod train_loss;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use decoder::{decode, decode_baseline, downsample_bilinear, upsample_bilinear};
pub(crate) use decoder::DecoderContext;
pub use encoder::{encode_image, encoder_input};
pub(crate) use encoder::{encoder_backward, encoder_forward};
pub use gradcheck::{gradient_check, gradcheck_fixture, GradCheckReport, REL_ERROR_FLOOR};
pub use highpass::{highpass, highpass_plane, FloatRaster};
pub use prompt::{encode_prompt, PromptEmbedding};
pub use train_loss::{loss_and_gradients, Batch, BaselineItem, LossOutput, LossSpec, PretrainItem, TrainItem};

use crate::types::Seed;
use rand_distr::{Distribution, Normal};

/// Embedding dimension `V`.
pub const EMBED_DIM: usize = 16;
/// Hidden width of the decoder's per-cell perceptron.
pub const HIDDEN: usize = 32;
/// Scorer input: cell embedding, prompt token, and their cosine.
pub const SCORER_INPUTS: usize = 2 * EMBED_DIM + 1;
/// RGB plus high-pass luminance.
pub const INPUT_CHANNELS: usize = 4;
pub const CONV_CHANNELS: [(usize, usize); 3] = [(4, 16), (16, 24), (24, EMBED_DIM)];
/// Fraction of Nyquist below which the high-pass branch removes frequencies.
pub const HIGHPASS_CUTOFF: f64 = 0.25;
/// Scale applied to the high-pass channel before the first convolution.
pub const HIGHPASS_GAIN: f64 = 4.0;
/// Std of the frozen Fourier projection.
pub const PROMPT_FREQ_SCALE: f64 = 2.0;
/// Sharpness of prompt-to-cell attention over positional similarities.
pub const ATTENTION_SHARPNESS: f64 = 4.0;

/// Which part of the model a parameter group belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Prompt,
    Decoder,
}

/// What is being optimized; decides which groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Region-to-region contrastive pretraining of the image encoder.
    Pretrain,
    /// Prompted source segmentation; encoder and prompt encoder frozen.
    Train,
    /// Plain binary segmentation without prompts (ablation).
    Baseline,
}

impl Mode {
    pub fn trains(self, stage: Stage) -> bool {
        matches!(
            (self, stage),
            (Mode::Pretrain, Stage::Encoder) | (Mode::Train | Mode::Baseline, Stage::Decoder)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub stage: Stage,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Group indices into [`ModelParams::groups`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub(crate) enum G {
    Conv1W,
    Conv1B,
    Conv2W,
    Conv2B,
    Conv3W,
    Conv3B,
    PromptProj,
    HiddenW,
    HiddenB,
    OutW,
    OutB,
    ConfW,
    ConfB,
}

fn layout() -> Vec<ParamGroup> {
    let specs: [(&'static str, Vec<usize>, Stage); 13] = [
        ("encoder.conv1.weight", vec![3, 3, 4, 16], Stage::Encoder),
        ("encoder.conv1.bias", vec![16], Stage::Encoder),
        ("encoder.conv2.weight", vec![3, 3, 16, 24], Stage::Encoder),
        ("encoder.conv2.bias", vec![24], Stage::Encoder),
        ("encoder.conv3.weight", vec![3, 3, 24, EMBED_DIM], Stage::Encoder),
        ("encoder.conv3.bias", vec![EMBED_DIM], Stage::Encoder),
        ("prompt.projection", vec![2, EMBED_DIM / 2], Stage::Prompt),
        ("decoder.hidden.weight", vec![SCORER_INPUTS, HIDDEN], Stage::Decoder),
        ("decoder.hidden.bias", vec![HIDDEN], Stage::Decoder),
        ("decoder.out.weight", vec![HIDDEN], Stage::Decoder),
        ("decoder.out.bias", vec![1], Stage::Decoder),
        ("confidence.weight", vec![HIDDEN], Stage::Decoder),
        ("confidence.bias", vec![1], Stage::Decoder),
    ];
    let mut offset = 0;
    specs
        .into_iter()
        .map(|(name, shape, stage)| {
            let g = ParamGroup {
                name,
                shape,
                offset,
                stage,
            };
            offset += g.len();
            g
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    groups: Vec<ParamGroup>,
    values: Vec<f64>,
}

impl ModelParams {
    /// Seeded initialization: He-normal convolutions, Gaussian Fourier
    /// projection, fan-in scaled decoder, zero biases and confidence head.
    pub fn init(seed: Seed) -> Self {
        let groups = layout();
        let total = groups.iter().map(ParamGroup::len).sum();
        let mut values = vec![0.0; total];
        for (i, g) in groups.iter().enumerate() {
            let std = match i {
                x if x == G::Conv1W as usize || x == G::Conv2W as usize || x == G::Conv3W as usize => {
                    (2.0 / (9 * g.shape[2]) as f64).sqrt()
                }
                x if x == G::PromptProj as usize => PROMPT_FREQ_SCALE,
                x if x == G::HiddenW as usize => (1.0 / SCORER_INPUTS as f64).sqrt(),
                x if x == G::OutW as usize => (1.0 / HIDDEN as f64).sqrt(),
                _ => 0.0,
            };
            if std > 0.0 {
                let mut rng = seed.derive_named(g.name, 0).rng();
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in &mut values[g.range()] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        let mut p = Self { groups, values };
        p.round_to_f32();
        p
    }

    pub(crate) fn zeros() -> Self {
        let groups = layout();
        let total = groups.iter().map(ParamGroup::len).sum();
        Self {
            groups,
            values: vec![0.0; total],
        }
    }

    pub(crate) fn from_parts(values: Vec<f64>) -> Option<Self> {
        let groups = layout();
        let total: usize = groups.iter().map(ParamGroup::len).sum();
        (values.len() == total).then_some(Self { groups, values })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn group_by_name(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub(crate) fn slice(&self, g: G) -> &[f64] {
        &self.values[self.groups[g as usize].range()]
    }

    pub(crate) fn range(&self, g: G) -> std::ops::Range<usize> {
        self.groups[g as usize].range()
    }

    /// Name of the group holding flat index `i`.
    pub fn group_of(&self, i: usize) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.range().contains(&i))
    }

    /// Per-coordinate flag: does `mode` update this value?
    pub fn trainable_mask(&self, mode: Mode) -> Vec<bool> {
        let mut mask = vec![false; self.values.len()];
        for g in &self.groups {
            if mode.trains(g.stage) {
                mask[g.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    /// Snaps every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    /// Copies all groups of `stage` from `other`.
    pub fn copy_stage_from(&mut self, other: &ModelParams, stage: Stage) {
        for g in &self.groups {
            if g.stage == stage {
                self.values[g.range()].copy_from_slice(&other.values[g.range()]);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU and its derivative.
#[inline]
pub(crate) fn silu(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    (x * s, s * (1.0 + x * (1.0 - s)))
}
