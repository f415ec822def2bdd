//! Audio spectrogram transformer.
//!
//! The log-Mel matrix is cut into overlapping 16x16 patches (stride 10),
//! each patch is linearly projected to a token, a trainable classification
//! token is prepended and a trainable positional table added. Pre-norm
//! encoder blocks (multi-head self-attention, then a GELU MLP, each with a
//! residual) follow, and a final layer norm plus a single-logit sigmoid head
//! read out the classification token.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] maps tensor names
//! to ranges. Gradients and optimizer moments share the same layout.

mod checkpoint;
mod linalg;
mod network;
mod optim;

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use network::{
    backward, forward, forward_patches, forward_trace, loss, patchify, score_features, Trace, LOSS_CLAMP,
};
pub use optim::{adam_step, lr_at_epoch, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (frequency bins, time frames)
    pub input_shape: (usize, usize),
    pub patch_size: (usize, usize),
    pub stride: (usize, usize),
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

/// Patches along one axis: `floor((len - patch) / stride) + 1`.
pub fn patches_along(len: usize, patch: usize, stride: usize) -> usize {
    if patch == 0 || stride == 0 || patch > len {
        0
    } else {
        (len - patch) / stride + 1
    }
}

impl ModelConfig {
    fn with_size(embed_dim: usize, n_layers: usize, n_heads: usize) -> Self {
        ModelConfig {
            input_shape: (64, 128),
            patch_size: (16, 16),
            stride: (10, 10),
            embed_dim,
            n_layers,
            n_heads,
            mlp_ratio: 4,
        }
    }

    /// Default desk-scale model.
    pub fn desk() -> Self {
        Self::with_size(64, 2, 4)
    }

    /// Base-size encoder (768 wide, 12 layers, 12 heads).
    pub fn paper() -> Self {
        Self::with_size(768, 12, 12)
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self::with_size(16, 1, 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::arg(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::arg("mlp_ratio must be >= 1"));
        }
        if self.n_patches() == 0 {
            return Err(Error::arg(format!(
                "patch {:?} with stride {:?} yields no patches on input {:?}",
                self.patch_size, self.stride, self.input_shape
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            patches_along(self.input_shape.0, self.patch_size.0, self.stride.0),
            patches_along(self.input_shape.1, self.patch_size.1, self.stride.1),
        )
    }

    pub fn n_patches(&self) -> usize {
        let (f, t) = self.grid();
        f * t
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size.0 * self.patch_size.1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.hidden_dim();
        let embed = self.patch_dim() * d + d + d + self.n_tokens() * d;
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
        embed + self.n_layers * block + 2 * d + d + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
}

/// Offsets of every tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub cls: Range<usize>,
    pub pos: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_gain: Range<usize>,
    pub lnf_bias: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub total: usize,
}

/// What kind of tensor a range holds; drives initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
    Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    pub kind: TensorKind,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut next = 0;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        let patch_w = take(cfg.patch_dim() * d);
        let patch_b = take(d);
        let cls = take(d);
        let pos = take(cfg.n_tokens() * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_gain: take(d),
                ln1_bias: take(d),
                qkv_w: take(d * 3 * d),
                qkv_b: take(3 * d),
                proj_w: take(d * d),
                proj_b: take(d),
                ln2_gain: take(d),
                ln2_bias: take(d),
                fc1_w: take(d * h),
                fc1_b: take(h),
                fc2_w: take(h * d),
                fc2_b: take(d),
            })
            .collect();
        let lnf_gain = take(d);
        let lnf_bias = take(d);
        let head_w = take(d);
        let head_b = take(1);
        Layout {
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            lnf_gain,
            lnf_bias,
            head_w,
            head_b,
            total: next,
        }
    }

    /// Every tensor with its name and shape, in buffer order.
    pub fn tensors(&self, cfg: &ModelConfig) -> Vec<TensorInfo> {
        use TensorKind::*;
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        let t = |name: String, shape: Vec<usize>, range: &Range<usize>, kind| TensorInfo {
            name,
            shape,
            range: range.clone(),
            kind,
        };
        let mut out = vec![
            t("patch.weight".into(), vec![cfg.patch_dim(), d], &self.patch_w, Weight),
            t("patch.bias".into(), vec![d], &self.patch_b, Bias),
            t("cls_token".into(), vec![d], &self.cls, Embedding),
            t("pos_embed".into(), vec![cfg.n_tokens(), d], &self.pos, Embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                t(format!("blocks.{i}.ln1.gain"), vec![d], &l.ln1_gain, Gain),
                t(format!("blocks.{i}.ln1.bias"), vec![d], &l.ln1_bias, Bias),
                t(format!("blocks.{i}.attn.qkv.weight"), vec![d, 3 * d], &l.qkv_w, Weight),
                t(format!("blocks.{i}.attn.qkv.bias"), vec![3 * d], &l.qkv_b, Bias),
                t(format!("blocks.{i}.attn.proj.weight"), vec![d, d], &l.proj_w, Weight),
                t(format!("blocks.{i}.attn.proj.bias"), vec![d], &l.proj_b, Bias),
                t(format!("blocks.{i}.ln2.gain"), vec![d], &l.ln2_gain, Gain),
                t(format!("blocks.{i}.ln2.bias"), vec![d], &l.ln2_bias, Bias),
                t(format!("blocks.{i}.mlp.fc1.weight"), vec![d, h], &l.fc1_w, Weight),
                t(format!("blocks.{i}.mlp.fc1.bias"), vec![h], &l.fc1_b, Bias),
                t(format!("blocks.{i}.mlp.fc2.weight"), vec![h, d], &l.fc2_w, Weight),
                t(format!("blocks.{i}.mlp.fc2.bias"), vec![d], &l.fc2_b, Bias),
            ]);
        }
        out.extend([
            t("norm.gain".into(), vec![d], &self.lnf_gain, Gain),
            t("norm.bias".into(), vec![d], &self.lnf_bias, Bias),
            t("head.weight".into(), vec![d], &self.head_w, Weight),
            t("head.bias".into(), vec![1], &self.head_b, Bias),
        ]);
        out
    }
}

/// Model weights (or a gradient with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl Parameters {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Parameters {
            config,
            data: vec![0.0; layout.total],
            layout,
        })
    }

    /// Truncated-normal (std 0.02) weights and embeddings, zero biases,
    /// unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng_for(seed, &[seed::stream::INIT]);
        for t in p.layout.tensors(&p.config) {
            let slice = &mut p.data[t.range];
            match t.kind {
                TensorKind::Weight | TensorKind::Embedding => {
                    slice.iter_mut().for_each(|v| *v = truncated_normal(&mut rng, INIT_STD))
                }
                TensorKind::Gain => slice.fill(1.0),
                TensorKind::Bias => slice.fill(0.0),
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            config: self.config,
            layout: self.layout.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensors(&self) -> Vec<TensorInfo> {
        self.layout.tensors(&self.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors().into_iter().find(|t| t.name == name).map(|t| &self.data[t.range])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.tensors().into_iter().find(|t| t.name == name)?.range;
        Some(&mut self.data[range])
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Parameters) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}
