//! MFCC front end for first-iteration pseudo-labels.
//!
//! Recipe: pre-emphasis 0.97, 25 ms Hamming window, 10 ms hop, 512-point
//! DFT power spectrum, 26 triangular mel filters over 0–8000 Hz, log with a
//! 1e-10 floor, orthonormal DCT-II keeping 13 coefficients (c0 replaced by
//! the log frame energy), then deltas and delta-deltas over ±2 frames.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

pub const MFCC_WINDOW: usize = 400;
pub const MFCC_HOP: usize = 160;
pub const MFCC_DIM: usize = 39;

const N_FFT: usize = 512;
const N_MELS: usize = 26;
const N_CEPS: usize = 13;
const PREEMPHASIS: f64 = 0.97;
const LOG_FLOOR: f64 = 1e-10;
const DELTA_WIDTH: usize = 2;

/// `T × 39` feature matrix at a 10 ms hop.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFrames {
    data: Vec<f64>,
    frames: usize,
}

impl MfccFrames {
    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * MFCC_DIM..(t + 1) * MFCC_DIM]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn hop_seconds(&self) -> f64 {
        MFCC_HOP as f64 / super::SAMPLE_RATE as f64
    }

    pub fn window_seconds(&self) -> f64 {
        MFCC_WINDOW as f64 / super::SAMPLE_RATE as f64
    }
}

/// `floor((N − 400)/160) + 1`, or `None` below one window.
pub fn mfcc_frame_count(samples: usize) -> Option<usize> {
    (samples >= MFCC_WINDOW).then(|| (samples - MFCC_WINDOW) / MFCC_HOP + 1)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `N_MELS × (N_FFT/2 + 1)` triangular weights.
fn mel_filterbank() -> Vec<Vec<f64>> {
    let sr = super::SAMPLE_RATE as f64;
    let top = hz_to_mel(sr / 2.0);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (N_MELS + 1) as f64))
        .collect();
    (0..N_MELS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=N_FFT / 2)
                .map(|k| {
                    let f = k as f64 * sr / N_FFT as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

fn deltas(feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t_len = feats.len();
    let dim = feats.first().map_or(0, Vec::len);
    let denom: f64 = 2.0 * (1..=DELTA_WIDTH).map(|n| (n * n) as f64).sum::<f64>();
    (0..t_len)
        .map(|t| {
            (0..dim)
                .map(|d| {
                    let mut acc = 0.0;
                    for n in 1..=DELTA_WIDTH {
                        let fwd = feats[(t + n).min(t_len - 1)][d];
                        let back = feats[t.saturating_sub(n)][d];
                        acc += n as f64 * (fwd - back);
                    }
                    acc / denom
                })
                .collect()
        })
        .collect()
}

pub fn mfcc(w: &Waveform) -> Result<MfccFrames> {
    let frames = mfcc_frame_count(w.len())
        .ok_or_else(|| Error::Length(format!("MFCC needs at least {MFCC_WINDOW} samples, got {}", w.len())))?;
    let x = &w.samples;
    let mut emph = Vec::with_capacity(x.len());
    emph.push(x[0] as f64);
    for i in 1..x.len() {
        emph.push(x[i] as f64 - PREEMPHASIS * x[i - 1] as f64);
    }
    let window: Vec<f64> = (0..MFCC_WINDOW)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (MFCC_WINDOW - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank();
    let fft = FftPlanner::new().plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];

    let mut statics = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = &emph[t * MFCC_HOP..t * MFCC_HOP + MFCC_WINDOW];
        let frame_energy: f64 = frame.iter().map(|v| v * v).sum();
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (n, (&v, &h)) in frame.iter().zip(&window).enumerate() {
            buf[n].re = v * h;
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..=N_FFT / 2].iter().map(|c| c.norm_sqr()).collect();
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|filt| {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        let mut ceps = dct_ortho(&log_mel, N_CEPS);
        ceps[0] = frame_energy.max(LOG_FLOOR).ln();
        statics.push(ceps);
    }
    let d1 = deltas(&statics);
    let d2 = deltas(&d1);
    let mut data = Vec::with_capacity(frames * MFCC_DIM);
    for t in 0..frames {
        data.extend_from_slice(&statics[t]);
        data.extend_from_slice(&d1[t]);
        data.extend_from_slice(&d2[t]);
    }
    Ok(MfccFrames { data, frames })
}

fn dct_ortho(x: &[f64], keep: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..keep)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(m, &v)| v * (PI * k as f64 * (m as f64 + 0.5) / n).cos())
                .sum();
            let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * norm
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth, SynthKind, SynthParams};

    #[test]
    fn frame_count_for_one_second() {
        let w = Waveform::new(vec![0.1; 16000]).unwrap();
        assert_eq!(mfcc(&w).unwrap().len(), 98);
        assert_eq!(mfcc_frame_count(16000), Some(98));
    }

    #[test]
    fn frame_count_formula_holds() {
        for n in (400..64000).step_by(997).chain([400, 559, 560, 64000]) {
            let w = Waveform::new(vec![0.0; n]).unwrap();
            assert_eq!(mfcc(&w).unwrap().len(), (n - 400) / 160 + 1, "N={n}");
        }
    }

    #[test]
    fn too_short_is_a_length_error() {
        let w = Waveform::new(vec![0.0; 399]).unwrap();
        assert!(matches!(mfcc(&w), Err(Error::Length(_))));
    }

    #[test]
    fn silence_gives_identical_frames() {
        let w = Waveform::new(vec![0.0; 4000]).unwrap();
        let m = mfcc(&w).unwrap();
        let first = m.frame(0).to_vec();
        assert!((first[0] - LOG_FLOOR.ln()).abs() < 1e-12);
        for t in 1..m.len() {
            assert_eq!(m.frame(t), first.as_slice());
        }
        assert!(first[N_CEPS..].iter().all(|&d| d == 0.0));
    }

    /// Static coefficients of one frame via a direct O(N²) DFT.
    fn brute_force_statics(x: &[f32], t: usize) -> Vec<f64> {
        let start = t * 160;
        let emph: Vec<f64> = (start..start + 400)
            .map(|i| {
                let cur = x[i] as f64;
                if i == 0 {
                    cur
                } else {
                    cur - 0.97 * x[i - 1] as f64
                }
            })
            .collect();
        let energy: f64 = emph.iter().map(|v| v * v).sum();
        let windowed: Vec<f64> = emph
            .iter()
            .enumerate()
            .map(|(n, v)| v * (0.54 - 0.46 * (2.0 * PI * n as f64 / 399.0).cos()))
            .collect();
        let power: Vec<f64> = (0..=256)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in windowed.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / 512.0;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let edges: Vec<f64> = (0..28).map(|i| inv(mel(8000.0) * i as f64 / 27.0)).collect();
        let logmel: Vec<f64> = (0..26)
            .map(|m| {
                let mut e = 0.0;
                for (k, p) in power.iter().enumerate() {
                    let f = k as f64 * 16000.0 / 512.0;
                    let w = if f > edges[m] && f <= edges[m + 1] {
                        (f - edges[m]) / (edges[m + 1] - edges[m])
                    } else if f > edges[m + 1] && f < edges[m + 2] {
                        (edges[m + 2] - f) / (edges[m + 2] - edges[m + 1])
                    } else {
                        0.0
                    };
                    e += w * p;
                }
                e.max(1e-10).ln()
            })
            .collect();
        let mut out: Vec<f64> = (0..13)
            .map(|k| {
                let s: f64 = (0..26)
                    .map(|m| logmel[m] * (PI * k as f64 * (m as f64 + 0.5) / 26.0).cos())
                    .sum();
                s * if k == 0 {
                    (1.0f64 / 26.0).sqrt()
                } else {
                    (2.0f64 / 26.0).sqrt()
                }
            })
            .collect();
        out[0] = energy.max(1e-10).ln();
        out
    }

    #[test]
    fn single_frame_matches_direct_dft() {
        let w = synth(SynthKind::Chirp, 0.1, 0, &SynthParams::default()).unwrap();
        let noise = synth(SynthKind::WhiteNoise, 0.1, 3, &SynthParams::default()).unwrap();
        let x: Vec<f32> = w.samples.iter().zip(&noise.samples).map(|(a, b)| a + 0.1 * b).collect();
        let wave = Waveform::new(x.clone()).unwrap();
        let m = mfcc(&wave).unwrap();
        for t in [0, 3, m.len() - 1] {
            let oracle = brute_force_statics(&x, t);
            for (k, (&a, &b)) in m.frame(t)[..13].iter().zip(&oracle).enumerate() {
                assert!((a - b).abs() < 1e-8, "frame {t} coeff {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn deltas_of_a_ramp_are_constant_in_the_interior() {
        let feats: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64]).collect();
        let d = deltas(&feats);
        for row in &d[2..8] {
            assert!((row[0] - 1.0).abs() < 1e-12);
        }
    }
}
