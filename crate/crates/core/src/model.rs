//! The full network: conv encoder, masking, positional convolution,
//! Transformer stack and codeword prediction head.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamStore, Real, Var};
use crate::objective::{apply_mask, masked_loss, HeadConfig, MaskSpec, PredictionHead};
use crate::transformer::{Transformer, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Gradient-check size: 2 layers, d_model 16, 2 heads, 4 clusters.
    Micro,
    /// Desk-scale training: 2 layers, d_model 32, 4 heads, 8 clusters.
    Toy,
    /// Base geometry: 12 layers, d_model 768, 8 heads.
    Base,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Preset::Micro),
            "toy" => Ok(Preset::Toy),
            "base" => Ok(Preset::Base),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected micro, toy or base)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Micro => "micro",
            Preset::Toy => "toy",
            Preset::Base => "base",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Micro => Self::small(8, 16, 2, 4, 8),
            Preset::Toy => Self::small(32, 32, 4, 8, 256),
            Preset::Base => ModelConfig {
                encoder: EncoderConfig::default(),
                transformer: TransformerConfig::base(),
                head: HeadConfig::default(),
            },
        }
    }

    fn small(channels: usize, d_model: usize, heads: usize, clusters: usize, d_e: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                channels,
                d_model,
                ..EncoderConfig::default()
            },
            transformer: TransformerConfig {
                d_model,
                heads,
                d_ff: 4 * d_model,
                layers: 2,
                ..TransformerConfig::base()
            },
            head: HeadConfig {
                d_e,
                clusters,
                ..HeadConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transformer.validate()?;
        self.head.validate()?;
        if self.encoder.d_model != self.transformer.d_model {
            return Err(Error::Config(format!(
                "encoder projects to {} dims but the Transformer expects {}",
                self.encoder.d_model, self.transformer.d_model
            )));
        }
        Ok(())
    }
}

/// Intermediate values of one utterance's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Conv features `[T × channels]`.
    pub features: Var,
    /// Final hidden states `[T × d_model]`.
    pub hidden: Var,
    /// Codeword log-probabilities `[T × C]`.
    pub logp: Var,
}

/// Parameter handles of the whole model; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct WavLm {
    config: ModelConfig,
    encoder: Encoder,
    transformer: Transformer,
    head: PredictionHead,
}

impl WavLm {
    /// Registers all parameters in `store`, initialised from `seed`.
    pub fn new<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config.encoder, store, &mut rng)?;
        let transformer = Transformer::new(&config.transformer, store, &mut rng)?;
        let head = PredictionHead::new(&config.head, config.transformer.d_model, store, &mut rng)?;
        Ok(WavLm {
            config: config.clone(),
            encoder,
            transformer,
            head,
        })
    }

    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn transformer(&self) -> &Transformer {
        &self.transformer
    }

    pub fn head(&self) -> &PredictionHead {
        &self.head
    }

    pub fn frames_for(&self, samples: usize) -> Option<usize> {
        self.config.encoder.frames_for(samples)
    }

    /// Runs one utterance. `rng` enables dropout and LayerDrop.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        wave: &[f32],
        mask: &MaskSpec,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let features = self.encoder.encode(g, store, wave)?;
        let projected = self.encoder.project(g, store, features)?;
        let emb = g.param(store, self.encoder.mask_embedding());
        let masked = apply_mask(g, projected, emb, mask)?;
        let x = self.encoder.add_positional(g, store, masked)?;
        let hidden = self.transformer.encoder_stack(g, store, x, rng)?;
        let logp = self.head.codeword_logprobs(g, store, hidden)?;
        Ok(Forward { features, hidden, logp })
    }

    /// Masked prediction loss of one utterance.
    pub fn utterance_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        wave: &[f32],
        mask: &MaskSpec,
        label_sets: &[&[u32]],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let fwd = self.forward(g, store, wave, mask, rng)?;
        masked_loss(g, fwd.logp, label_sets, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_parse() {
        for p in [Preset::Micro, Preset::Toy, Preset::Base] {
            ModelConfig::preset(p).validate().unwrap();
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn micro_forward_shapes() {
        let cfg = ModelConfig::preset(Preset::Micro);
        let (model, store) = WavLm::init::<f64>(&cfg, 0).unwrap();
        let wave: Vec<f32> = (0..1680).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
        assert_eq!(model.frames_for(wave.len()), Some(5));
        let mut g = Graph::new();
        let mask = MaskSpec::from_starts(5, 2, &[1]);
        let f = model.forward(&mut g, &store, &wave, &mask, None).unwrap();
        assert_eq!(g.shape(f.hidden), &[5, 16]);
        assert_eq!(g.shape(f.logp), &[5, 4]);
        let labels = [0u32, 1, 2, 3, 0];
        let loss = model
            .utterance_loss(&mut g, &store, &wave, &mask, &[&labels], None)
            .unwrap();
        assert!(g.value(loss).item().unwrap() > 0.0);
    }

    #[test]
    fn mismatched_widths_rejected() {
        let mut cfg = ModelConfig::preset(Preset::Micro);
        cfg.encoder.d_model = 32;
        assert!(cfg.validate().is_err());
    }
}
