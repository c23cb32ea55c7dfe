//! Synthetic training audio: utterances built from tone, chirp, noise and
//! near-silence segments, plus background noise clips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{synth, SynthKind, SynthParams, Waveform, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub utterances: usize,
    pub seconds: f64,
    pub segments: usize,
    pub noise_clips: usize,
    pub noise_seconds: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            utterances: 16,
            seconds: 1.0,
            segments: 4,
            noise_clips: 4,
            noise_seconds: 0.5,
            seed: 7,
        }
    }
}

const TONES: [f64; 5] = [220.0, 440.0, 880.0, 1760.0, 3520.0];

fn segment(kind: usize, seconds: f64, seed: u64, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    let tone = TONES[rng.random_range(0..TONES.len())];
    let (k, params) = match kind {
        0 => (
            SynthKind::Sine,
            SynthParams {
                amplitude: 0.5,
                frequency: tone,
                end_frequency: tone,
            },
        ),
        1 => (
            SynthKind::Chirp,
            SynthParams {
                amplitude: 0.4,
                frequency: 300.0,
                end_frequency: 3000.0,
            },
        ),
        2 => (
            SynthKind::WhiteNoise,
            SynthParams {
                amplitude: 0.3,
                ..SynthParams::default()
            },
        ),
        3 => (
            SynthKind::PinkNoise,
            SynthParams {
                amplitude: 0.4,
                ..SynthParams::default()
            },
        ),
        // Near-silence: quiet noise keeps MFCC frames distinct.
        _ => (
            SynthKind::WhiteNoise,
            SynthParams {
                amplitude: 0.003,
                ..SynthParams::default()
            },
        ),
    };
    synth(k, seconds, seed, &params)
}

/// Deterministic utterances of equal length and a set of noise clips.
pub fn synthetic_corpus(cfg: &CorpusConfig) -> Result<(Vec<Waveform>, Vec<Waveform>)> {
    if cfg.utterances == 0 || cfg.segments == 0 || !(cfg.seconds > 0.0) {
        return Err(Error::Config(
            "corpus needs utterances, segments and a positive duration".into(),
        ));
    }
    let total = (cfg.seconds * SAMPLE_RATE as f64).round() as usize;
    let per = total / cfg.segments;
    if per == 0 {
        return Err(Error::Config("too many segments for the utterance length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut utterances = Vec::with_capacity(cfg.utterances);
    for _ in 0..cfg.utterances {
        let mut samples = Vec::with_capacity(total);
        for s in 0..cfg.segments {
            let len = if s + 1 == cfg.segments {
                total - samples.len()
            } else {
                per
            };
            let kind = rng.random_range(0..5);
            let seed = rng.random();
            samples.extend(segment(kind, len as f64 / SAMPLE_RATE as f64, seed, &mut rng)?.samples);
        }
        samples.resize(total, 0.0);
        utterances.push(Waveform::new(samples)?);
    }
    let mut noises = Vec::with_capacity(cfg.noise_clips);
    for i in 0..cfg.noise_clips {
        let kind = if i % 2 == 0 {
            SynthKind::PinkNoise
        } else {
            SynthKind::WhiteNoise
        };
        let params = SynthParams {
            amplitude: 0.3,
            ..SynthParams::default()
        };
        noises.push(synth(kind, cfg.noise_seconds, rng.random(), &params)?);
    }
    Ok((utterances, noises))
}
