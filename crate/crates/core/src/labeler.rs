//! Frame-level pseudo-labels from k-means over MFCC features of clean audio.
//!
//! Features are z-normalised per dimension with fit-set statistics, then
//! clustered with k-means++ initialisation and Lloyd iterations. Labels at
//! the 100 Hz MFCC rate are decimated to the 50 Hz encoder frame rate.
//! Clustering is not tied to 39-dim MFCCs; hidden states of a trained model
//! can be fed to [`Codebook::fit`] as well (experimental second pass).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{mfcc, Waveform, MFCC_DIM};

pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub iters: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            clusters: 32,
            iters: 50,
            restarts: 1,
            seed: 0,
        }
    }
}

/// Result of one clustering run (the best restart).
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dims: usize,
    pub centers: Vec<f64>,
    pub labels: Vec<u32>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the initial one.
    pub history: Vec<f64>,
}

impl KMeans {
    pub fn clusters(&self) -> usize {
        self.centers.len() / self.dims
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dims..(j + 1) * self.dims]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center and its squared distance; ties go to the lowest index.
fn nearest(x: &[f64], centers: &[f64], dims: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(dims).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(points: &[f64], centers: &[f64], dims: usize, labels: &mut [u32]) -> f64 {
    let mut inertia = 0.0;
    for (x, label) in points.chunks_exact(dims).zip(labels.iter_mut()) {
        let (j, d) = nearest(x, centers, dims);
        *label = j as u32;
        inertia += d;
    }
    inertia
}

fn plus_plus_init(points: &[f64], dims: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dims;
    let mut centers = Vec::with_capacity(k * dims);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * dims..(first + 1) * dims]);
    let mut d2: Vec<f64> = points.chunks_exact(dims).map(|x| sq_dist(x, &centers)).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = &points[pick * dims..(pick + 1) * dims];
        centers.extend_from_slice(c);
        for (d, x) in d2.iter_mut().zip(points.chunks_exact(dims)) {
            *d = d.min(sq_dist(x, c));
        }
    }
    centers
}

/// Moves each empty cluster onto the point farthest from every center.
/// Returns false when no point lies away from the centers.
fn reseed_empty(points: &[f64], dims: usize, centers: &mut [f64], labels: &[u32]) -> bool {
    let k = centers.len() / dims;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l as usize] += 1;
    }
    for j in (0..k).filter(|&j| counts[j] == 0) {
        let (far, dist) = points
            .chunks_exact(dims)
            .map(|x| nearest(x, centers, dims).1)
            .enumerate()
            .fold((0, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
        if dist <= 0.0 {
            return false;
        }
        centers[j * dims..(j + 1) * dims].copy_from_slice(&points[far * dims..(far + 1) * dims]);
    }
    true
}

fn has_empty(labels: &[u32], k: usize) -> bool {
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l as usize] = true;
    }
    seen.contains(&false)
}

fn lloyd(points: &[f64], dims: usize, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Result<KMeans> {
    let n = points.len() / dims;
    let k = cfg.clusters;
    let mut centers = plus_plus_init(points, dims, k, rng);
    let mut labels = vec![0u32; n];
    let mut history = vec![assign_all(points, &centers, dims, &mut labels)];
    for _ in 0..cfg.iters {
        let mut sums = vec![0.0; k * dims];
        let mut counts = vec![0usize; k];
        for (x, &l) in points.chunks_exact(dims).zip(&labels) {
            let l = l as usize;
            counts[l] += 1;
            for (s, v) in sums[l * dims..(l + 1) * dims].iter_mut().zip(x) {
                *s += v;
            }
        }
        for j in (0..k).filter(|&j| counts[j] > 0) {
            for d in 0..dims {
                centers[j * dims + d] = sums[j * dims + d] / counts[j] as f64;
            }
        }
        reseed_empty(points, dims, &mut centers, &labels);
        let before = labels.clone();
        history.push(assign_all(points, &centers, dims, &mut labels));
        if labels == before {
            break;
        }
    }
    // A final reassignment can still leave a cluster empty.
    let mut fixes = 0;
    while has_empty(&labels, k) && fixes < k {
        if !reseed_empty(points, dims, &mut centers, &labels) {
            break;
        }
        history.push(assign_all(points, &centers, dims, &mut labels));
        fixes += 1;
    }
    if has_empty(&labels, k) {
        return Err(Error::Codebook(format!(
            "fewer than {k} distinct feature vectors; a cluster stays empty"
        )));
    }
    Ok(KMeans {
        dims,
        centers,
        labels,
        inertia: *history.last().expect("history starts non-empty"),
        history,
    })
}

/// k-means++ / Lloyd clustering of `points` (row-major, `dims` columns),
/// keeping the lowest-inertia restart.
pub fn kmeans(points: &[f64], dims: usize, cfg: &KMeansConfig) -> Result<KMeans> {
    if dims == 0 || !points.len().is_multiple_of(dims) {
        return Err(Error::Shape(format!(
            "{} values do not form rows of {dims} features",
            points.len()
        )));
    }
    let n = points.len() / dims;
    if cfg.clusters == 0 || n < cfg.clusters {
        return Err(Error::Codebook(format!(
            "need at least as many frames as clusters, got {n} frames for {} clusters",
            cfg.clusters
        )));
    }
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature value {i}")));
    }
    let mut best: Option<KMeans> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let run = lloyd(points, dims, cfg, &mut rng)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Cluster centers in normalised feature space plus the normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dims: usize,
    centers: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookManifest {
    version: u32,
    clusters: usize,
    dims: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    blob: String,
}

fn feature_stats(features: &[f64], dims: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (features.len() / dims) as f64;
    let mut mean = vec![0.0; dims];
    for x in features.chunks_exact(dims) {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dims];
    for x in features.chunks_exact(dims) {
        for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    // Constant dimensions keep unit scale.
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Codebook {
    pub fn from_parts(centers: Vec<f64>, dims: usize, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if dims == 0 || !centers.len().is_multiple_of(dims) || mean.len() != dims || std.len() != dims {
            return Err(Error::Codebook(format!(
                "inconsistent codebook: {} center values, {} means, {} stds for {dims} dims",
                centers.len(),
                mean.len(),
                std.len()
            )));
        }
        if centers.len() / dims < 2 {
            return Err(Error::Codebook("a codebook needs at least 2 clusters".into()));
        }
        if centers.iter().chain(&mean).any(|v| !v.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Codebook(
                "codebook values must be finite with positive scales".into(),
            ));
        }
        Ok(Codebook {
            dims,
            centers,
            mean,
            std,
        })
    }

    /// Normalises `features`, clusters them and keeps the centers at 32-bit
    /// precision so a saved codebook labels exactly like the fitted one.
    pub fn fit(features: &[f64], dims: usize, cfg: &KMeansConfig) -> Result<(Self, KMeans)> {
        if dims == 0 || !features.len().is_multiple_of(dims) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {dims}",
                features.len()
            )));
        }
        if features.is_empty() {
            return Err(Error::Codebook("no features to cluster".into()));
        }
        let (mean, std) = feature_stats(features, dims);
        let normed: Vec<f64> = features
            .chunks_exact(dims)
            .flat_map(|x| x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s))
            .collect();
        let run = kmeans(&normed, dims, cfg)?;
        let centers = run.centers.iter().map(|&c| c as f32 as f64).collect();
        Ok((Self::from_parts(centers, dims, mean, std)?, run))
    }

    pub fn clusters(&self) -> usize {
        self.centers.len() / self.dims
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Center `j` in normalised units.
    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dims..(j + 1) * self.dims]
    }

    /// Center `j` in raw feature units.
    pub fn raw_center(&self, j: usize) -> Vec<f64> {
        self.center(j)
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((c, m), s)| c * s + m)
            .collect()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Nearest center per feature row; ties go to the lowest index.
    pub fn assign(&self, features: &[f64]) -> Result<Vec<u32>> {
        if !features.len().is_multiple_of(self.dims) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of {} features",
                features.len(),
                self.dims
            )));
        }
        Ok(features
            .chunks_exact(self.dims)
            .map(|x| nearest(&self.normalize(x), &self.centers, self.dims).0 as u32)
            .collect())
    }

    /// Writes `path` (JSON manifest) and a sibling `.bin` blob of
    /// little-endian f32 centers.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let blob_path = path.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Codebook(format!("no file name in {}", path.display())))?;
        let manifest = CodebookManifest {
            version: CODEBOOK_VERSION,
            clusters: self.clusters(),
            dims: self.dims,
            mean: self.mean.clone(),
            std: self.std.clone(),
            blob: blob_name,
        };
        let bytes: Vec<u8> = self.centers.iter().flat_map(|&c| (c as f32).to_le_bytes()).collect();
        fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: CodebookManifest = serde_json::from_str(&text)?;
        if m.version != CODEBOOK_VERSION {
            return Err(Error::Codebook(format!("unsupported codebook version {}", m.version)));
        }
        let blob_path: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&m.blob);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let expected = m.clusters * m.dims * 4;
        if bytes.len() != expected {
            return Err(Error::Codebook(format!(
                "center blob {} has {} bytes, expected {expected}",
                blob_path.display(),
                bytes.len()
            )));
        }
        let centers = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::from_parts(centers, m.dims, m.mean, m.std)
    }
}

/// Labels at a fixed frame rate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelSequence {
    pub labels: Vec<u32>,
    pub frame_rate: u32,
}

/// Keeps every other label (100 Hz → 50 Hz), then truncates or repeats the
/// last label to exactly `encoder_frames`.
pub fn align_to_encoder(labels_100hz: &[u32], encoder_frames: usize) -> Result<PseudoLabelSequence> {
    if labels_100hz.is_empty() {
        return Err(Error::Length("cannot align an empty label sequence".into()));
    }
    if encoder_frames == 0 {
        return Err(Error::Length("encoder frame count must be positive".into()));
    }
    let mut labels: Vec<u32> = labels_100hz.iter().step_by(2).copied().take(encoder_frames).collect();
    let last = *labels.last().expect("non-empty input");
    labels.resize(encoder_frames, last);
    Ok(PseudoLabelSequence { labels, frame_rate: 50 })
}

/// MFCC → nearest center → alignment to `encoder_frames`.
pub fn label_waveform(cb: &Codebook, wave: &Waveform, encoder_frames: usize) -> Result<PseudoLabelSequence> {
    if cb.dims() != MFCC_DIM {
        return Err(Error::Codebook(format!(
            "codebook has {} dims, MFCC features have {MFCC_DIM}",
            cb.dims()
        )));
    }
    let feats = mfcc(wave)?;
    align_to_encoder(&cb.assign(feats.as_flat())?, encoder_frames)
}

/// Fits a codebook on the MFCCs of all `waves`.
pub fn fit_mfcc_codebook(waves: &[Waveform], cfg: &KMeansConfig) -> Result<(Codebook, KMeans)> {
    let mut features = Vec::new();
    for w in waves {
        features.extend(mfcc(w)?.into_flat());
    }
    Codebook::fit(&features, MFCC_DIM, cfg)
}

/// One line per utterance of space-separated labels.
pub fn write_labels(path: impl AsRef<Path>, sequences: &[PseudoLabelSequence]) -> Result<()> {
    let mut text = String::new();
    for seq in sequences {
        let line: Vec<String> = seq.labels.iter().map(u32::to_string).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>().map_err(|_| {
                        Error::InvalidValue(format!("line {} of {}: bad label {tok:?}", i + 1, path.display()))
                    })
                })
                .collect()
        })
        .collect()
}
