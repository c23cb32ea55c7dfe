use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sine,
    WhiteNoise,
    PinkNoise,
    Chirp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Peak amplitude, at most 1.
    pub amplitude: f64,
    /// Sine frequency, or chirp start frequency (Hz).
    pub frequency: f64,
    /// Chirp end frequency (Hz).
    pub end_frequency: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            amplitude: 0.5,
            frequency: 440.0,
            end_frequency: 4000.0,
        }
    }
}

/// Deterministic test signal of `seconds` length at 16 kHz.
pub fn synth(kind: SynthKind, seconds: f64, seed: u64, params: &SynthParams) -> Result<Waveform> {
    if !(seconds > 0.0) {
        return Err(Error::InvalidValue(format!("duration must be > 0, got {seconds}")));
    }
    if !(0.0..=1.0).contains(&params.amplitude) {
        return Err(Error::InvalidValue(format!(
            "amplitude must lie in [0, 1], got {}",
            params.amplitude
        )));
    }
    let n = (seconds * SAMPLE_RATE as f64).round().max(1.0) as usize;
    let sr = SAMPLE_RATE as f64;
    let amp = params.amplitude;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = match kind {
        SynthKind::Sine => (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * params.frequency * i as f64 / sr).sin())
            .collect(),
        SynthKind::Chirp => {
            let dur = n as f64 / sr;
            let rate = (params.end_frequency - params.frequency) / dur;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let phase = params.frequency * t + 0.5 * rate * t * t;
                    amp * (2.0 * std::f64::consts::PI * phase).sin()
                })
                .collect()
        }
        SynthKind::WhiteNoise => (0..n).map(|_| amp * rng.random_range(-1.0..1.0)).collect(),
        SynthKind::PinkNoise => pink(n, amp, &mut rng),
    };
    Waveform::new(samples.into_iter().map(|x| x as f32).collect())
}

/// Gaussian spectrum shaped by `1/√f`, so power falls 3 dB per octave,
/// then peak-normalised.
fn pink(n: usize, amp: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spectrum = vec![Complex::new(0.0, 0.0); n];
    for k in 1..=n / 2 {
        let scale = 1.0 / (k as f64).sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        spectrum[k] = Complex::new(re * scale, im * scale);
        if k != n - k {
            spectrum[n - k] = spectrum[k].conj();
        } else {
            spectrum[k].im = 0.0;
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spectrum);
    let peak = spectrum.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    let norm = if peak > 0.0 { amp / peak } else { 0.0 };
    spectrum.iter().map(|c| c.re * norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_starts_at_zero() {
        let w = synth(SynthKind::Sine, 1.0, 0, &SynthParams::default()).unwrap();
        assert_eq!(w.len(), 16000);
        assert_eq!(w.samples[0], 0.0);
    }

    #[test]
    fn noise_is_seeded() {
        let p = SynthParams::default();
        for kind in [SynthKind::WhiteNoise, SynthKind::PinkNoise] {
            let a = synth(kind, 0.5, 9, &p).unwrap();
            let b = synth(kind, 0.5, 9, &p).unwrap();
            let c = synth(kind, 0.5, 10, &p).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn peaks_stay_within_unit_range() {
        let p = SynthParams {
            amplitude: 1.0,
            ..SynthParams::default()
        };
        for kind in [
            SynthKind::Sine,
            SynthKind::WhiteNoise,
            SynthKind::PinkNoise,
            SynthKind::Chirp,
        ] {
            let w = synth(kind, 0.3, 4, &p).unwrap();
            assert!(w.samples.iter().all(|s| s.abs() <= 1.0), "{kind:?}");
        }
    }

    #[test]
    fn rejects_nonpositive_duration() {
        assert!(synth(SynthKind::Sine, 0.0, 0, &SynthParams::default()).is_err());
    }
}
