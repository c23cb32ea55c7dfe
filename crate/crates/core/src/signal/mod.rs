//! Waveforms, WAV files, synthetic audio and MFCC features.

mod mfcc;
mod synth;
mod wav;

pub use mfcc::{mfcc, mfcc_frame_count, MfccFrames, MFCC_DIM, MFCC_HOP, MFCC_WINDOW};
pub use synth::{synth, SynthKind, SynthParams};
pub use wav::{read_wav, read_wav_dir, write_wav, WavWriteReport};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} of waveform")));
        }
        Ok(Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Equal-length utterances processed together.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBatch {
    utterances: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl WaveBatch {
    pub fn new(utterances: Vec<Vec<f32>>) -> Result<Self> {
        if let Some(first) = utterances.first() {
            let len = first.len();
            if let Some((i, u)) = utterances.iter().enumerate().find(|(_, u)| u.len() != len) {
                return Err(Error::Length(format!(
                    "utterance {i} has {} samples, utterance 0 has {len}",
                    u.len()
                )));
            }
        }
        Ok(WaveBatch {
            utterances,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn from_waveforms(waves: &[Waveform]) -> Result<Self> {
        Self::new(waves.iter().map(|w| w.samples.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Samples per utterance.
    pub fn utterance_len(&self) -> usize {
        self.utterances.first().map_or(0, Vec::len)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn utterance(&self, i: usize) -> &[f32] {
        &self.utterances[i]
    }

    pub fn utterances(&self) -> &[Vec<f32>] {
        &self.utterances
    }

    pub fn waveform(&self, i: usize) -> Waveform {
        Waveform {
            samples: self.utterances[i].clone(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Mean square over the full signal, `Σ u·u / L`.
pub fn energy(samples: &[f32]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Length("energy of an empty signal".into()));
    }
    let mut acc = 0.0f64;
    for &s in samples {
        acc += s as f64 * s as f64;
    }
    Ok(acc / samples.len() as f64)
}
