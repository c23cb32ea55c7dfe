//! Configuration, the pre-training step, the toy training loop and
//! checkpoints.

mod adam;
mod checkpoint;
mod corpus;

pub use adam::{learning_rate, Adam, AdamConfig};
pub use checkpoint::{
    load_checkpoint, param_entries, read_manifest, save_checkpoint, CheckpointManifest, ParamEntry, RngState,
    CHECKPOINT_VERSION,
};
pub use corpus::{synthetic_corpus, CorpusConfig};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::{fit_mfcc_codebook, label_waveform, Codebook, KMeansConfig, PseudoLabelSequence};
use crate::mixer::MixConfig;
use crate::model::{ModelConfig, Preset, WavLm};
use crate::numeric::{Graph, ParamStore, Real};
use crate::objective::{denoising_step_inputs, MaskConfig};
use crate::signal::{read_wav_dir, WaveBatch, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Utterances per step.
    pub batch_size: usize,
    pub seed: u64,
    pub mix: MixConfig,
    pub mask: MaskConfig,
    pub kmeans: KMeansConfig,
    pub adam: AdamConfig,
    /// Synthetic corpus, used when `in_dir` is unset.
    pub corpus: CorpusConfig,
    pub in_dir: Option<PathBuf>,
    pub noise_dir: Option<PathBuf>,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Window of the moving average used for loss summaries.
    pub smoothing: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::preset(Preset::Toy);
        TrainConfig {
            steps: 200,
            warmup_steps: 20,
            peak_lr: 2e-3,
            batch_size: 8,
            seed: 0,
            mix: MixConfig::default(),
            mask: MaskConfig::default(),
            kmeans: KMeansConfig {
                clusters: model.head.clusters,
                iters: 50,
                restarts: 3,
                seed: 0,
            },
            adam: AdamConfig::default(),
            corpus: CorpusConfig::default(),
            in_dir: None,
            noise_dir: None,
            checkpoint_every: 0,
            smoothing: 20,
            model,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mix.validate()?;
        self.mask.validate()?;
        self.adam.validate()?;
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.batch_size == 0 || self.smoothing == 0 {
            return Err(Error::Config("batch_size and smoothing must be positive".into()));
        }
        if self.kmeans.clusters != self.model.head.clusters {
            return Err(Error::Config(format!(
                "k-means uses {} clusters but the head predicts {}",
                self.kmeans.clusters, self.model.head.clusters
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Training audio: equal-length clean utterances and optional noise clips.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub utterances: Vec<Waveform>,
    pub noises: Vec<Waveform>,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let (utterances, mut noises) = match &cfg.in_dir {
            Some(dir) => (read_wav_dir(dir)?.into_iter().map(|(_, w)| w).collect(), Vec::new()),
            None => synthetic_corpus(&cfg.corpus)?,
        };
        if let Some(dir) = &cfg.noise_dir {
            noises = read_wav_dir(dir)?.into_iter().map(|(_, w)| w).collect();
        }
        // Equal lengths are required by batching.
        WaveBatch::from_waveforms(&utterances)?;
        if utterances.len() < cfg.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the {} available utterances",
                cfg.batch_size,
                utterances.len()
            )));
        }
        Ok(TrainData { utterances, noises })
    }
}

/// Fits the MFCC codebook on the clean corpus and labels every utterance.
pub fn prepare_labels(cfg: &TrainConfig, data: &TrainData) -> Result<(Codebook, Vec<PseudoLabelSequence>)> {
    let (codebook, _) = fit_mfcc_codebook(&data.utterances, &cfg.kmeans)?;
    let labels = data
        .utterances
        .iter()
        .map(|w| {
            let frames = cfg.model.encoder.frames_for(w.len()).ok_or_else(|| {
                Error::Length(format!(
                    "utterance of {} samples is shorter than the encoder's {} sample receptive field",
                    w.len(),
                    cfg.model.encoder.receptive_field()
                ))
            })?;
            label_waveform(&codebook, w, frames)
        })
        .collect::<Result<_>>()?;
    Ok((codebook, labels))
}

#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub clean: &'a WaveBatch,
    /// Labels of the clean utterances, positionally paired.
    pub labels: &'a [PseudoLabelSequence],
    pub noises: &'a [Waveform],
    /// Seeds the mixing, masking and dropout of this step.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Masked-frame loss summed per utterance, averaged over the batch.
    pub loss: f64,
    pub grad_norm: f64,
    pub masked_frames: usize,
}

/// Mixing, masking, forward, loss, backward and one Adam update.
pub fn pretrain_step<T: Real>(
    model: &WavLm,
    store: &mut ParamStore<T>,
    opt: &mut Adam,
    input: &StepInput<'_>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepStats> {
    let mut seeds = ChaCha8Rng::seed_from_u64(input.seed);
    let mix = cfg.mix.with_seed(seeds.random());
    let mask_seed = seeds.random();
    let mut dropout = ChaCha8Rng::seed_from_u64(seeds.random());
    let stochastic = cfg.model.transformer.dropout > 0.0 || cfg.model.transformer.layer_drop > 0.0;

    let enc = &cfg.model.encoder;
    let inputs = denoising_step_inputs(
        input.clean,
        input.labels,
        input.noises,
        &mix,
        &cfg.mask,
        mask_seed,
        enc.total_stride(),
        enc.receptive_field(),
    )?;
    store.zero_grads();
    let batch = input.clean.len() as f64;
    let mut total = 0.0;
    let mut masked_frames = 0;
    for (i, (labels, mask)) in inputs.labels.iter().zip(&inputs.masks).enumerate() {
        let mut g = Graph::new();
        let rng = if stochastic { Some(&mut dropout) } else { None };
        let loss = model.utterance_loss(
            &mut g,
            store,
            inputs.mixed.utterance(i),
            mask,
            &[labels.labels.as_slice()],
            rng,
        )?;
        let value = g.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} for utterance {i} of the batch with seed {}",
                input.seed
            )));
        }
        let scaled = g.scale(loss, 1.0 / batch);
        g.backward_into(scaled, store)?;
        total += value / batch;
        masked_frames += mask.len();
    }
    let grad_norm = store.grad_norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "gradient norm {grad_norm} for the batch with seed {}",
            input.seed
        )));
    }
    opt.step(store, lr);
    Ok(StepStats {
        loss: total,
        grad_norm,
        masked_frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// `ln C` times the masked frames per utterance: the loss of uniform predictions.
    pub uniform_loss: f64,
}

/// Mean of the first and last `window` losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub initial: f64,
    pub last: f64,
    pub ratio: f64,
}

pub fn summarize(records: &[StepRecord], window: usize) -> Option<LossSummary> {
    if records.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(records.len());
    let mean = |r: &[StepRecord]| r.iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
    let initial = mean(&records[..w]);
    let last = mean(&records[records.len() - w..]);
    Some(LossSummary {
        initial,
        last,
        ratio: last / initial,
    })
}

pub struct TrainOutcome {
    pub model: WavLm,
    pub store: ParamStore<f32>,
    pub codebook: Codebook,
    pub records: Vec<StepRecord>,
    pub summary: LossSummary,
}

/// Batch indices and step seed of step `step`.
pub fn step_plan(seed: u64, step: usize, utterances: usize, batch: usize) -> (Vec<usize>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    let picks = index::sample(&mut rng, utterances, batch).into_vec();
    (picks, rng.random())
}

/// The pre-training loop. With `out_dir`, writes `loss.csv` and
/// checkpoints (`checkpoint-{step}.json` and `checkpoint-final.json`).
pub fn train(cfg: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (codebook, labels) = prepare_labels(cfg, data)?;
    let (model, mut store) = WavLm::init::<f32>(&cfg.model, cfg.seed)?;
    let mut opt = Adam::new(&cfg.adam, &store)?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.csv");
            let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(w, "step,loss,grad_norm,lr").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let ln_c = (cfg.model.head.clusters as f64).ln();
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (picks, seed) = step_plan(cfg.seed, step, data.utterances.len(), cfg.batch_size);
        let clean = WaveBatch::new(picks.iter().map(|&i| data.utterances[i].samples.clone()).collect())?;
        let batch_labels: Vec<_> = picks.iter().map(|&i| labels[i].clone()).collect();
        let lr = learning_rate(step, cfg.steps, cfg.warmup_steps, cfg.peak_lr);
        let input = StepInput {
            clean: &clean,
            labels: &batch_labels,
            noises: &data.noises,
            seed,
        };
        let stats = pretrain_step(&model, &mut store, &mut opt, &input, cfg, lr)?;
        let record = StepRecord {
            step,
            loss: stats.loss,
            grad_norm: stats.grad_norm,
            lr,
            uniform_loss: ln_c * stats.masked_frames as f64 / cfg.batch_size as f64,
        };
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{},{},{},{}", step, record.loss, record.grad_norm, record.lr)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        records.push(record);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let rng = RngState {
                    seed: cfg.seed,
                    step: step as u64 + 1,
                };
                save_checkpoint(dir.join(format!("checkpoint-{}.json", step + 1)), &model, &store, rng)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let rng = RngState {
            seed: cfg.seed,
            step: cfg.steps as u64,
        };
        save_checkpoint(dir.join("checkpoint-final.json"), &model, &store, rng)?;
        codebook.save(dir.join("codebook.json"))?;
    }
    let summary = summarize(&records, cfg.smoothing).ok_or_else(|| Error::Config("training ran zero steps".into()))?;
    Ok(TrainOutcome {
        model,
        store,
        codebook,
        records,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
        let partial = TrainConfig::from_json(r#"{"steps": 50, "warmup_steps": 5}"#).unwrap();
        assert_eq!(partial.steps, 50);
        assert_eq!(partial.batch_size, cfg.batch_size);
        assert!(TrainConfig::from_json(r#"{"steps": 5, "warmup_steps": 10}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"stepz": 5}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"peak_lr": 0.0}"#).is_err());
    }

    #[test]
    fn step_plan_is_seeded() {
        let a = step_plan(3, 5, 16, 8);
        assert_eq!(a, step_plan(3, 5, 16, 8));
        assert_ne!(a, step_plan(3, 6, 16, 8));
        let mut idx = a.0.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 8);
    }

    #[test]
    fn summary_windows() {
        let recs: Vec<StepRecord> = (0..10)
            .map(|s| StepRecord {
                step: s,
                loss: 10.0 - s as f64,
                grad_norm: 0.0,
                lr: 0.0,
                uniform_loss: 0.0,
            })
            .collect();
        let s = summarize(&recs, 2).unwrap();
        assert_eq!(s.initial, 9.5);
        assert_eq!(s.last, 1.5);
        assert!(summarize(&[], 3).is_none());
    }
}
