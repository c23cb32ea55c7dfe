//! Noisy and overlapped utterance simulation.
//!
//! Each utterance is picked as a primary with probability `p`. A picked
//! primary receives, over a random region of at most half its length, a
//! scaled segment of either another utterance of the batch (energy ratio
//! drawn from `utterance_ratio_range`) or a noise clip (probability `p_n`,
//! ratio from `noise_ratio_range`). The scale makes the full-utterance
//! energies of primary and scaled secondary differ by exactly `r` dB.
//!
//! Randomness for utterance `i` comes from its own ChaCha stream `i` under
//! `seed`, so the result does not depend on processing order. Secondary
//! utterances are read from the caller's unmodified batch.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{energy, WaveBatch, Waveform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    /// Probability that an utterance is mixed.
    pub p: f64,
    /// Probability that a mixed utterance receives noise rather than speech.
    pub p_n: f64,
    /// Energy ratio range (dB) for a secondary utterance.
    pub utterance_ratio_range: (f64, f64),
    /// Energy ratio range (dB) for a noise clip.
    pub noise_ratio_range: (f64, f64),
    pub seed: u64,
}

impl Default for MixConfig {
    fn default() -> Self {
        MixConfig {
            p: 0.2,
            p_n: 0.1,
            utterance_ratio_range: (-5.0, 5.0),
            noise_ratio_range: (-5.0, 20.0),
            seed: 0,
        }
    }
}

impl MixConfig {
    /// Base-model setting: speech overlap only.
    pub fn base() -> Self {
        MixConfig {
            p_n: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        MixConfig { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p", self.p), ("p_n", self.p_n)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, (lo, hi)) in [
            ("utterance_ratio_range", self.utterance_ratio_range),
            ("noise_ratio_range", self.noise_ratio_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} must be ordered, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecondarySource {
    /// Another utterance of the batch (possibly the primary itself).
    Utterance { index: usize },
    /// A noise clip, tiled or cropped to the utterance length from `offset`.
    Noise { index: usize, offset: usize },
}

/// Record of one mixing operation. Start offsets are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixEvent {
    pub primary_index: usize,
    pub secondary_source: SecondarySource,
    /// Energy ratio in dB.
    pub r: f64,
    /// Mixed length in samples.
    pub l: usize,
    pub s_pri: usize,
    pub s_sec: usize,
    pub scl: f64,
}

impl MixEvent {
    /// 0-based sample range modified in the primary.
    pub fn primary_range(&self) -> Range<usize> {
        self.s_pri - 1..self.s_pri - 1 + self.l
    }

    /// 0-based sample range read from the secondary.
    pub fn secondary_range(&self) -> Range<usize> {
        self.s_sec - 1..self.s_sec - 1 + self.l
    }
}

#[derive(Debug, Clone)]
pub struct MixOutput {
    pub mixed: WaveBatch,
    pub events: Vec<MixEvent>,
}

/// `sqrt(E_pri / (10^(r/10) · E_sec))`.
pub fn mixing_scale(e_pri: f64, e_sec: f64, r_db: f64) -> Result<f64> {
    if !(e_pri > 0.0) || !(e_sec > 0.0) {
        return Err(Error::InvalidValue(format!(
            "mixing needs positive energies, got primary {e_pri} and secondary {e_sec}"
        )));
    }
    Ok((e_pri / (10f64.powf(r_db / 10.0) * e_sec)).sqrt())
}

/// Noise clip brought to `len` samples: tiled when shorter, cropped from
/// `offset` when longer.
pub fn fit_noise(noise: &[f32], len: usize, offset: usize) -> Vec<f32> {
    if noise.len() <= len {
        noise.iter().copied().cycle().take(len).collect()
    } else {
        noise[offset..offset + len].to_vec()
    }
}

fn draw_ratio(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Random stream owned by utterance `index`.
fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn simulate_batch(batch: &WaveBatch, noises: &[Waveform], cfg: &MixConfig) -> Result<MixOutput> {
    cfg.validate()?;
    let len = batch.utterance_len();
    let count = batch.len();
    if count > 0 && len < 2 {
        return Err(Error::Length(format!(
            "mixing needs utterances of at least 2 samples, got {len}"
        )));
    }
    if cfg.p_n > 0.0 && noises.is_empty() && cfg.p > 0.0 {
        return Err(Error::InvalidValue(
            "noise probability is positive but no noise clips were given".into(),
        ));
    }
    if let Some(i) = noises.iter().position(Waveform::is_empty) {
        return Err(Error::Length(format!("noise clip {i} is empty")));
    }

    let mut mixed: Vec<Vec<f32>> = batch.utterances().to_vec();
    let mut events = Vec::new();
    for (i, out) in mixed.iter_mut().enumerate() {
        let mut rng = utterance_rng(cfg.seed, i);
        if rng.random::<f64>() >= cfg.p {
            continue;
        }
        let v: f64 = rng.random();
        let (source, r) = if v > cfg.p_n {
            let index = rng.random_range(0..count);
            (
                SecondarySource::Utterance { index },
                draw_ratio(&mut rng, cfg.utterance_ratio_range),
            )
        } else {
            let index = rng.random_range(0..noises.len());
            (
                SecondarySource::Noise { index, offset: 0 },
                draw_ratio(&mut rng, cfg.noise_ratio_range),
            )
        };
        let l = rng.random_range(1..=len / 2);
        let s_pri = rng.random_range(1..=len - l);
        let s_sec = rng.random_range(1..=len - l);

        let (source, secondary) = match source {
            SecondarySource::Utterance { index } => (source, batch.utterance(index).to_vec()),
            SecondarySource::Noise { index, .. } => {
                let clip = &noises[index].samples;
                let offset = if clip.len() > len {
                    rng.random_range(0..=clip.len() - len)
                } else {
                    0
                };
                (SecondarySource::Noise { index, offset }, fit_noise(clip, len, offset))
            }
        };
        let e_pri = energy(batch.utterance(i))?;
        let e_sec = energy(&secondary)?;
        let scl = mixing_scale(e_pri, e_sec, r)?;
        let event = MixEvent {
            primary_index: i,
            secondary_source: source,
            r,
            l,
            s_pri,
            s_sec,
            scl,
        };
        for (dst, &src) in out[event.primary_range()]
            .iter_mut()
            .zip(&secondary[event.secondary_range()])
        {
            *dst = (*dst as f64 + scl * src as f64) as f32;
        }
        events.push(event);
    }
    Ok(MixOutput {
        mixed: WaveBatch::new(mixed)?,
        events,
    })
}
