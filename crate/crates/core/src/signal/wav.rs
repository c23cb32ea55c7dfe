use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Outcome of writing a waveform as 16-bit PCM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WavWriteReport {
    /// Samples outside [−1, 1] that were clamped.
    pub clipped: usize,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let bad = |field, found: String, expected: &str| Error::WavFormat {
        path: path.to_path_buf(),
        field,
        found,
        expected: expected.to_string(),
    };
    if spec.channels != 1 {
        return Err(bad("channels", spec.channels.to_string(), "1"));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(bad("sample_rate", spec.sample_rate.to_string(), "16000"));
    }
    if spec.sample_format != SampleFormat::Int {
        return Err(bad("sample_format", "float".into(), "integer PCM"));
    }
    if spec.bits_per_sample != 16 {
        return Err(bad("bits_per_sample", spec.bits_per_sample.to_string(), "16"));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples)
}

/// Writes 16-bit PCM mono; samples beyond [−1, 1] are clamped and counted.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<WavWriteReport> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    let mut report = WavWriteReport::default();
    for &s in &wave.samples {
        if !(-1.0..=1.0).contains(&s) {
            report.clipped += 1;
        }
        let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(report)
}

/// Reads every `.wav` file of a flat directory, sorted by file name.
pub fn read_wav_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Waveform)>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    paths.into_iter().map(|p| read_wav(&p).map(|w| (p, w))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth, SynthKind, SynthParams};

    #[test]
    fn sine_round_trip_within_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let w = synth(SynthKind::Sine, 1.0, 0, &SynthParams::default()).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.len(), w.len());
        for (a, b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    fn write_raw(path: &Path, channels: u16, rate: u32) {
        let spec = WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(path, spec).unwrap();
        for _ in 0..(100 * channels) {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn wrong_rate_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("8k.wav");
        write_raw(&path, 1, 8000);
        match read_wav(&path) {
            Err(Error::WavFormat { field, .. }) => assert_eq!(field, "sample_rate"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn stereo_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        write_raw(&path, 2, 16000);
        match read_wav(&path) {
            Err(Error::WavFormat { field, .. }) => assert_eq!(field, "channels"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn export_counts_clipped_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loud.wav");
        let w = Waveform::new(vec![0.0, 1.5, -2.0, 0.5]).unwrap();
        assert_eq!(write_wav(&path, &w).unwrap().clipped, 2);
        let r = read_wav(&path).unwrap();
        assert!((r.samples[1] - 32767.0 / 32768.0).abs() < 1e-7);
        assert_eq!(r.samples[2], -1.0);
    }
}
