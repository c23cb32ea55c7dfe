//! Span masking, the cosine codeword distribution and the masked
//! prediction loss on simulated inputs with clean-speech targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::PseudoLabelSequence;
use crate::mixer::{simulate_batch, MixConfig, MixEvent, SecondarySource};
use crate::nn::{randn, Linear};
use crate::numeric::{Graph, ParamId, ParamStore, Real, Var};
use crate::signal::{WaveBatch, Waveform};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub span: usize,
    pub start_prob: f64,
    /// Add one span when sampling produced none.
    pub force_min: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            span: 10,
            start_prob: 0.08,
            force_min: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.span == 0 {
            return Err(Error::Config("mask span must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.start_prob) {
            return Err(Error::Config(format!(
                "mask start probability must lie in [0, 1], got {}",
                self.start_prob
            )));
        }
        Ok(())
    }
}

/// Masked frame indices (sorted, unique) of a `frames`-long sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub frames: usize,
    pub indices: Vec<usize>,
}

impl MaskSpec {
    pub fn empty(frames: usize) -> Self {
        MaskSpec {
            frames,
            indices: Vec::new(),
        }
    }

    pub fn all(frames: usize) -> Self {
        MaskSpec {
            frames,
            indices: (0..frames).collect(),
        }
    }

    /// Union of spans starting at `starts`, clipped to the sequence.
    pub fn from_starts(frames: usize, span: usize, starts: &[usize]) -> Self {
        let mut masked = vec![false; frames];
        for &s in starts {
            for m in masked.iter_mut().take(frames.min(s + span)).skip(s) {
                *m = true;
            }
        }
        MaskSpec {
            frames,
            indices: (0..frames).filter(|&t| masked[t]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }
}

/// Every frame starts a span with probability `start_prob`.
pub fn sample_masks(frames: usize, cfg: &MaskConfig, seed: u64) -> Result<MaskSpec> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::Length("cannot mask an empty sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<usize> = (0..frames).filter(|_| rng.random::<f64>() < cfg.start_prob).collect();
    if starts.is_empty() && cfg.force_min {
        starts.push(rng.random_range(0..=frames.saturating_sub(cfg.span)));
    }
    Ok(MaskSpec::from_starts(frames, cfg.span, &starts))
}

/// Replaces the masked rows of `x` by `mask_embedding`.
pub fn apply_mask<T: Real>(g: &mut Graph<T>, x: Var, mask_embedding: Var, mask: &MaskSpec) -> Result<Var> {
    let rows = g.shape(x)[0];
    if mask.frames != rows {
        return Err(Error::Shape(format!(
            "mask covers {} frames, input has {rows}",
            mask.frames
        )));
    }
    if mask.is_empty() {
        return Ok(x);
    }
    g.replace_rows(x, mask_embedding, &mask.indices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Codeword embedding width.
    pub d_e: usize,
    pub clusters: usize,
    pub temperature: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            d_e: 256,
            clusters: 32,
            temperature: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_e == 0 || self.clusters < 2 {
            return Err(Error::Config(
                "prediction head needs d_e ≥ 1 and at least 2 clusters".into(),
            ));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Projection `W^P` and codeword embeddings scored by cosine similarity.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    config: HeadConfig,
    proj: Linear,
    codewords: ParamId,
}

impl PredictionHead {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: &HeadConfig,
        d_model: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let proj = Linear::new(store, "head.proj", d_model, config.d_e, rng)?;
        let cw = randn(&[config.clusters, config.d_e], 1.0, rng);
        let codewords = store.add("head.codewords", cw.cast())?;
        Ok(PredictionHead {
            config: config.clone(),
            proj,
            codewords,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn proj(&self) -> Linear {
        self.proj
    }

    pub fn codewords(&self) -> ParamId {
        self.codewords
    }

    /// `log softmax_c(cos(h·W^P, e_c)/τ)` for every row of `h`.
    pub fn codeword_logprobs<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let projected = self.proj.forward(g, store, h)?;
        let logits = self.cosine_logits(g, store, projected)?;
        g.log_softmax_rows(logits)
    }

    /// `cos(p, e_c)/τ` for already projected rows `p`.
    pub fn cosine_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, projected: Var) -> Result<Var> {
        let pn = g.normalize_rows(projected, COSINE_EPS);
        let e = g.param(store, self.codewords);
        let en = g.normalize_rows(e, COSINE_EPS);
        let et = g.transpose(en)?;
        let sims = g.matmul(pn, et)?;
        Ok(g.scale(sims, 1.0 / self.config.temperature))
    }
}

/// `−Σ_{label sets} Σ_{t∈M} log p(z_t | h_t)`; zero when `M` is empty.
pub fn masked_loss<T: Real>(g: &mut Graph<T>, logp: Var, label_sets: &[&[u32]], mask: &MaskSpec) -> Result<Var> {
    let (frames, clusters) = {
        let s = g.shape(logp);
        (s[0], s[1])
    };
    if mask.frames != frames {
        return Err(Error::Shape(format!(
            "mask covers {} frames, predictions {frames}",
            mask.frames
        )));
    }
    let mut targets = Vec::with_capacity(mask.len() * label_sets.len());
    for (k, labels) in label_sets.iter().enumerate() {
        if labels.len() != frames {
            return Err(Error::Length(format!(
                "label set {k} has {} labels for {frames} frames",
                labels.len()
            )));
        }
        if let Some((t, z)) = labels.iter().enumerate().find(|(_, &z)| z as usize >= clusters) {
            return Err(Error::InvalidValue(format!(
                "label {z} at frame {t} of set {k} is outside 0..{clusters}"
            )));
        }
        targets.extend(mask.indices.iter().map(|&t| (t, labels[t] as usize)));
    }
    g.nll(logp, targets)
}

/// Where the target of one masked frame came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetProvenance {
    /// Utterance whose input frame is predicted.
    pub utterance: usize,
    pub frame: usize,
    /// Clean utterance the label was computed from.
    pub label_source: usize,
    pub label: u32,
    /// Secondary source overlapping this frame's samples, if any.
    pub overlapped_by: Option<SecondarySource>,
}

/// Mixed inputs, masks and clean-derived targets for one step.
#[derive(Debug, Clone)]
pub struct DenoisingInputs {
    pub mixed: WaveBatch,
    pub events: Vec<MixEvent>,
    pub labels: Vec<PseudoLabelSequence>,
    pub masks: Vec<MaskSpec>,
    pub provenance: Vec<TargetProvenance>,
}

/// Encoder frame `t` covers samples `[stride·t, stride·t + field)`.
fn frame_overlaps(event: &MixEvent, t: usize, stride: usize, field: usize) -> bool {
    let r = event.primary_range();
    let (lo, hi) = (stride * t, stride * t + field);
    r.start < hi && lo < r.end
}

/// Pairs the mixed version of each utterance with the labels of its clean
/// version. `clean_labels[i]` must come from `clean.utterance(i)`.
#[allow(clippy::too_many_arguments)]
pub fn denoising_step_inputs(
    clean: &WaveBatch,
    clean_labels: &[PseudoLabelSequence],
    noises: &[Waveform],
    mix: &MixConfig,
    mask: &MaskConfig,
    mask_seed: u64,
    frame_stride: usize,
    receptive_field: usize,
) -> Result<DenoisingInputs> {
    if clean_labels.len() != clean.len() {
        return Err(Error::Length(format!(
            "{} label sequences for {} utterances",
            clean_labels.len(),
            clean.len()
        )));
    }
    let out = simulate_batch(clean, noises, mix)?;
    let mut masks = Vec::with_capacity(clean.len());
    let mut provenance = Vec::new();
    for (i, labels) in clean_labels.iter().enumerate() {
        let frames = labels.labels.len();
        let m = sample_masks(frames, mask, mask_seed.wrapping_add(i as u64))?;
        let event = out.events.iter().find(|e| e.primary_index == i);
        for &t in &m.indices {
            provenance.push(TargetProvenance {
                utterance: i,
                frame: t,
                label_source: i,
                label: labels.labels[t],
                overlapped_by: event
                    .filter(|e| frame_overlaps(e, t, frame_stride, receptive_field))
                    .map(|e| e.secondary_source),
            });
        }
        masks.push(m);
    }
    Ok(DenoisingInputs {
        mixed: out.mixed,
        events: out.events,
        labels: clean_labels.to_vec(),
        masks,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn no_starts_no_mask() {
        let cfg = MaskConfig {
            start_prob: 0.0,
            force_min: false,
            ..MaskConfig::default()
        };
        assert!(sample_masks(50, &cfg, 1).unwrap().is_empty());
        let forced = MaskConfig { force_min: true, ..cfg };
        assert_eq!(sample_masks(50, &forced, 1).unwrap().len(), 10);
        assert_eq!(sample_masks(4, &forced, 1).unwrap().len(), 4);
    }

    #[test]
    fn span_truncated_at_end() {
        let m = MaskSpec::from_starts(20, 10, &[17]);
        assert_eq!(m.indices, vec![17, 18, 19]);
        let m = MaskSpec::from_starts(20, 3, &[0, 2]);
        assert_eq!(m.indices, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn masks_are_seeded() {
        let cfg = MaskConfig::default();
        assert_eq!(sample_masks(300, &cfg, 9).unwrap(), sample_masks(300, &cfg, 9).unwrap());
        assert_ne!(
            sample_masks(300, &cfg, 9).unwrap(),
            sample_masks(300, &cfg, 10).unwrap()
        );
        assert!(sample_masks(0, &cfg, 0).is_err());
    }

    #[test]
    fn apply_mask_replaces_only_masked_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[4, 3], |i| i as f64));
        let e = g.constant(Tensor::new(&[3], vec![-1.0, -2.0, -3.0]).unwrap());
        let same = apply_mask(&mut g, x, e, &MaskSpec::empty(4)).unwrap();
        assert_eq!(g.value(same), g.value(x));
        let m = MaskSpec::from_starts(4, 2, &[1]);
        let y = apply_mask(&mut g, x, e, &m).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[0.0, 1.0, 2.0]);
        assert_eq!(v.row(1), &[-1.0, -2.0, -3.0]);
        assert_eq!(v.row(2), &[-1.0, -2.0, -3.0]);
        assert_eq!(v.row(3), &[9.0, 10.0, 11.0]);
        let all = apply_mask(&mut g, x, e, &MaskSpec::all(4)).unwrap();
        assert!((0..4).all(|r| g.value(all).row(r) == [-1.0, -2.0, -3.0]));
    }

    #[test]
    fn out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let logp = g.constant(Tensor::full(&[3, 4], -(4f64.ln())));
        let labels = [0u32, 4, 1];
        assert!(matches!(
            masked_loss(&mut g, logp, &[&labels], &MaskSpec::all(3)),
            Err(Error::InvalidValue(_))
        ));
        assert!(masked_loss(&mut g, logp, &[&labels[..2]], &MaskSpec::all(3)).is_err());
    }
}
