//! Convolutional waveform encoder and the convolutional positional embedding.
//!
//! Seven blocks of `conv1d → layer norm (over channels) → GELU` turn a
//! 16 kHz waveform into frames covering 400 samples at a 320-sample stride.
//! The frames are normalised, projected to the model width and, after
//! optional masking, receive a grouped-convolution positional embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{randn, LayerNorm, Linear};
use crate::numeric::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub d_model: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 512,
            strides: vec![5, 2, 2, 2, 2, 2, 2],
            kernels: vec![10, 3, 3, 3, 3, 2, 2],
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            d_model: 768,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.kernels.len() {
            return Err(Error::Config(format!(
                "encoder needs matching non-empty strides and kernels, got {} and {}",
                self.strides.len(),
                self.kernels.len()
            )));
        }
        if self.strides.iter().chain(&self.kernels).any(|&v| v == 0) || self.channels == 0 {
            return Err(Error::Config(
                "encoder strides, kernels and channels must be positive".into(),
            ));
        }
        if self.pos_conv_groups == 0 || !self.d_model.is_multiple_of(self.pos_conv_groups) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible into {} positional-convolution groups",
                self.d_model, self.pos_conv_groups
            )));
        }
        if self.pos_conv_kernel == 0 {
            return Err(Error::Config("positional convolution kernel must be positive".into()));
        }
        Ok(())
    }

    /// Product of the strides (320 for the standard geometry).
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Samples seen by one output frame (400 for the standard geometry).
    pub fn receptive_field(&self) -> usize {
        let mut field = 1;
        for (&k, &s) in self.kernels.iter().zip(&self.strides).rev() {
            field = (field - 1) * s + k;
        }
        field
    }

    /// Frame count from the per-block recurrence `T' = ⌊(T − k)/s⌋ + 1`.
    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        let mut t = samples;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            if t < k {
                return None;
            }
            t = (t - k) / s + 1;
        }
        Some(t)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: ParamId,
    norm: LayerNorm,
    stride: usize,
}

/// Parameter handles of the encoder front end.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    blocks: Vec<ConvBlock>,
    feature_norm: LayerNorm,
    proj: Linear,
    pos_weight: ParamId,
    pos_bias: ParamId,
    mask_embedding: ParamId,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.kernels.len());
        let mut in_ch = 1;
        for (i, (&k, &s)) in config.kernels.iter().zip(&config.strides).enumerate() {
            let fan_in = (in_ch * k) as f64;
            let w = randn(&[config.channels, in_ch, k], (2.0 / fan_in).sqrt(), rng);
            blocks.push(ConvBlock {
                weight: store.add(format!("encoder.block{i}.conv.weight"), w.cast())?,
                norm: LayerNorm::new(store, &format!("encoder.block{i}.norm"), config.channels)?,
                stride: s,
            });
            in_ch = config.channels;
        }
        let feature_norm = LayerNorm::new(store, "encoder.feature_norm", config.channels)?;
        let proj = Linear::new(store, "encoder.proj", config.channels, config.d_model, rng)?;
        let per_group = config.d_model / config.pos_conv_groups;
        let std = (4.0 / (config.pos_conv_kernel * config.d_model) as f64).sqrt();
        let pos_w = randn(&[config.d_model, per_group, config.pos_conv_kernel], std, rng);
        let pos_weight = store.add("encoder.pos_conv.weight", pos_w.cast())?;
        let pos_bias = store.add("encoder.pos_conv.bias", Tensor::zeros(&[config.d_model]))?;
        let mask = crate::nn::uniform(&[config.d_model], 0.0, 1.0, rng);
        let mask_embedding = store.add("encoder.mask_embedding", mask.cast())?;
        Ok(Encoder {
            config: config.clone(),
            blocks,
            feature_norm,
            proj,
            pos_weight,
            pos_bias,
            mask_embedding,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn mask_embedding(&self) -> ParamId {
        self.mask_embedding
    }

    /// Conv feature frames `[T × channels]` of a raw waveform.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, wave: &[f32]) -> Result<Var> {
        let min = self.config.receptive_field();
        if wave.len() < min {
            return Err(Error::Length(format!(
                "encoder needs at least {min} samples, got {}",
                wave.len()
            )));
        }
        let input = Tensor::new(&[1, wave.len()], wave.iter().map(|&s| T::lit(s as f64)).collect())?;
        let mut x = g.constant(input);
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            let w = g.param(store, block.weight);
            let y = g.conv1d(x, w, None, block.stride, 1, 0)?;
            let frames = g.transpose(y)?;
            let normed = block.norm.forward(g, store, frames)?;
            let act = g.gelu(normed);
            x = if i == last { act } else { g.transpose(act)? };
        }
        Ok(x)
    }

    /// Feature normalisation and the linear map to `d_model`.
    pub fn project<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let normed = self.feature_norm.forward(g, store, features)?;
        self.proj.forward(g, store, normed)
    }

    /// Adds `GELU(grouped_conv(x))` with same-length padding; one trailing
    /// frame is dropped for even kernels.
    pub fn add_positional<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let frames = g.shape(x)[0];
        let k = self.config.pos_conv_kernel;
        let xt = g.transpose(x)?;
        let w = g.param(store, self.pos_weight);
        let b = g.param(store, self.pos_bias);
        let conv = g.conv1d(xt, w, Some(b), 1, self.config.pos_conv_groups, k / 2)?;
        let conv = if k.is_multiple_of(2) {
            g.slice_cols(conv, 0, frames)?
        } else {
            conv
        };
        let act = g.gelu(conv);
        let pos = g.transpose(act)?;
        g.add(x, pos)
    }

    /// Projection followed by the positional embedding, without masking.
    pub fn project_and_posembed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let p = self.project(g, store, features)?;
        self.add_positional(g, store, p)
    }
}
