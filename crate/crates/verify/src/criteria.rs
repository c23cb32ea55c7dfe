use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavlm_core::encoder::{Encoder, EncoderConfig};
use wavlm_core::labeler::{fit_mfcc_codebook, label_waveform, KMeansConfig};
use wavlm_core::mixer::{fit_noise, simulate_batch, MixConfig, SecondarySource};
use wavlm_core::model::{ModelConfig, Preset, WavLm};
use wavlm_core::objective::{denoising_step_inputs, masked_loss, MaskConfig, MaskSpec, PredictionHead};
use wavlm_core::signal::{energy, synth, SynthKind, SynthParams, WaveBatch};
use wavlm_core::train::{param_entries, synthetic_corpus, train, CorpusConfig, TrainConfig, TrainData};
use wavlm_core::transformer::stability::{naive_path, stable_path};
use wavlm_core::transformer::{BucketConfig, Transformer, TransformerConfig};
use wavlm_core::{Graph, ParamStore, Result, Tensor};

use crate::oracles::{exact_bucket, finite_difference_check, naive_attention, GroupCheck};
use crate::stats::{chi_square_uniform, ks_uniform};

/// Outcome of one check: pass flag plus a one-line explanation.
pub(crate) struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(failures: Vec<String>, summary: String) -> Self {
        if failures.is_empty() {
            Outcome {
                passed: true,
                detail: summary,
            }
        } else {
            Outcome {
                passed: false,
                detail: format!("{summary}; {}", failures.join("; ")),
            }
        }
    }
}

fn within(elapsed: Duration, limit_secs: f64, failures: &mut Vec<String>) {
    if elapsed.as_secs_f64() >= limit_secs {
        failures.push(format!("took {:.2} s, limit {limit_secs} s", elapsed.as_secs_f64()));
    }
}

pub(crate) fn bucket_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = BucketConfig::default();
    let mut failures = Vec::new();
    let mut mismatches = 0;
    for off in -2000i64..=2000 {
        let got = cfg.index(off);
        if got != exact_bucket(off, cfg.n, cfg.m) {
            mismatches += 1;
            if mismatches <= 3 {
                failures.push(format!(
                    "offset {off}: got {got}, exact {}",
                    exact_bucket(off, cfg.n, cfg.m)
                ));
            }
        }
        if got >= cfg.n {
            failures.push(format!("offset {off} maps outside the table: {got}"));
        }
        if off.unsigned_abs() >= cfg.m as u64 {
            let sat = if off > 0 { cfg.n - 1 } else { cfg.n / 2 - 1 };
            if got != sat {
                failures.push(format!("offset {off} not saturated: {got}"));
            }
        }
    }
    if cfg.index(-799) != 159 || cfg.index(799) != 319 {
        failures.push(format!(
            "boundary: −799 → {}, 799 → {}",
            cfg.index(-799),
            cfg.index(799)
        ));
    }
    within(start.elapsed(), 1.0, &mut failures);
    Ok(Outcome::new(
        failures,
        format!("4001 offsets, {mismatches} mismatches against exact integer evaluation"),
    ))
}

fn tiny_transformer(seed: u64) -> Result<(Transformer, ParamStore<f64>)> {
    let cfg = TransformerConfig {
        d_model: 16,
        heads: 2,
        d_ff: 64,
        layers: 1,
        ..TransformerConfig::base()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let t = Transformer::new(&cfg, &mut store, &mut rng)?;
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    Ok((t, store))
}

pub(crate) fn stable_attention() -> Result<Outcome> {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let (t, store) = tiny_transformer(case)?;
        let rows = rng.random_range(1..=32);
        let h = Tensor::from_fn(&[rows, 16], |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let out = t.attention(&mut g, &store, x, 0)?;
        let oracle = naive_attention(&t, &store, &h, 0);
        let diff = g
            .value(out.output)
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    if worst >= 1e-10 {
        failures.push(format!("max difference {worst:.3e}"));
    }

    // Logits q·k/√d of magnitude 1e5 on the diagonal, mixed signs elsewhere.
    let d = 8;
    let val = (1e5 * (d as f64).sqrt() / d as f64).sqrt();
    let q = Tensor::from_fn(&[6, d], |i| if (i / d) % 2 == 0 { val } else { -val });
    let naive = naive_path(&q, &q, None);
    let stable = stable_path(&q, &q, 32.0);
    if !naive.exponentials.any_flagged() {
        failures.push("naive path not flagged".into());
    }
    if stable.pre_bias_args.any_flagged() || stable.scaled_logits.any_flagged() {
        failures.push("stable path flagged".into());
    }
    within(start.elapsed(), 10.0, &mut failures);
    Ok(Outcome::new(
        failures,
        format!(
            "100 cases, max |stable − naive| = {worst:.2e}; naive logits up to {:.1e} flagged {} times, stable flagged {}",
            naive.logits.max_abs,
            naive.exponentials.flagged,
            stable.pre_bias_args.flagged
        ),
    ))
}

pub(crate) fn mixing_fidelity() -> Result<Outcome> {
    let start = Instant::now();
    let (n, len) = (100_000usize, 64usize);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let utts: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect())
        .collect();
    let batch = WaveBatch::new(utts)?;
    let p = SynthParams::default();
    let noises = vec![
        synth(SynthKind::WhiteNoise, 0.002, 1, &p)?,
        synth(SynthKind::PinkNoise, 0.01, 2, &p)?,
        synth(SynthKind::Sine, 0.003, 3, &p)?,
    ];
    let cfg = MixConfig::default().with_seed(99);
    let out = simulate_batch(&batch, &noises, &cfg)?;
    let mut failures = Vec::new();

    let events = out.events.len() as f64;
    let frac = events / n as f64;
    let sigma = (cfg.p * (1.0 - cfg.p) / n as f64).sqrt();
    if (frac - cfg.p).abs() > 3.0 * sigma {
        failures.push(format!("modified fraction {frac:.4}"));
    }
    let noisy = out
        .events
        .iter()
        .filter(|e| matches!(e.secondary_source, SecondarySource::Noise { .. }))
        .count() as f64;
    let noise_frac = noisy / events;
    let noise_sigma = (cfg.p_n * (1.0 - cfg.p_n) / events).sqrt();
    if (noise_frac - cfg.p_n).abs() > 3.0 * noise_sigma {
        failures.push(format!("noise fraction {noise_frac:.4}"));
    }

    let half = len / 2;
    let mut jitter = ChaCha8Rng::seed_from_u64(32);
    let mut l_counts = vec![0u64; half];
    let (mut s_pri, mut s_sec, mut r_utt, mut r_noise) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut worst_identity: f64 = 0.0;
    for e in &out.events {
        if e.l < 1 || e.l > half {
            failures.push(format!("mix length {} outside 1..={half}", e.l));
            break;
        }
        l_counts[e.l - 1] += 1;
        // Jittered probability integral transform of the discrete starts.
        let span = (len - e.l) as f64;
        s_pri.push((e.s_pri as f64 - 1.0 + jitter.random::<f64>()) / span);
        s_sec.push((e.s_sec as f64 - 1.0 + jitter.random::<f64>()) / span);
        let sec = match e.secondary_source {
            SecondarySource::Utterance { index } => {
                let (lo, hi) = cfg.utterance_ratio_range;
                r_utt.push((e.r - lo) / (hi - lo));
                batch.utterance(index).to_vec()
            }
            SecondarySource::Noise { index, offset } => {
                let (lo, hi) = cfg.noise_ratio_range;
                r_noise.push((e.r - lo) / (hi - lo));
                fit_noise(&noises[index].samples, len, offset)
            }
        };
        let e_pri = energy(batch.utterance(e.primary_index))?;
        let e_sec = energy(&sec)?;
        let r = 10.0 * (e_pri / (e.scl * e.scl * e_sec)).log10();
        worst_identity = worst_identity.max((r - e.r).abs());
    }
    if worst_identity >= 1e-9 {
        failures.push(format!("energy identity off by {worst_identity:.3e}"));
    }
    let pvals = [
        ("l", chi_square_uniform(&l_counts)),
        ("s_pri", ks_uniform(&s_pri)),
        ("s_sec", ks_uniform(&s_sec)),
        ("r(utterance)", ks_uniform(&r_utt)),
        ("r(noise)", ks_uniform(&r_noise)),
    ];
    for (name, pv) in pvals {
        if pv <= 0.001 {
            failures.push(format!("{name} uniformity p = {pv:.2e}"));
        }
    }
    within(start.elapsed(), 60.0, &mut failures);
    let ps: Vec<String> = pvals.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    Ok(Outcome::new(
        failures,
        format!(
            "{n} utterances: modified {frac:.4}, noise {noise_frac:.4}, identity err {worst_identity:.1e}, p-values [{}]",
            ps.join(", ")
        ),
    ))
}

pub(crate) fn encoder_geometry() -> Result<Outcome> {
    let start = Instant::now();
    let cfg = EncoderConfig {
        channels: 32,
        d_model: 32,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&cfg, &mut store, &mut rng)?;
    let mut failures = Vec::new();
    let wave = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> { (0..n).map(|_| rng.random_range(-0.5..0.5)).collect() };
    for (samples, frames) in [(400, 1), (16000, 49)] {
        let mut g = Graph::new();
        let x = enc.encode(&mut g, &store, &wave(samples, &mut rng))?;
        if g.shape(x)[0] != frames {
            failures.push(format!("{samples} samples → {} frames", g.shape(x)[0]));
        }
    }
    let base = wave(16000, &mut rng);
    let mut g = Graph::new();
    let x = enc.encode(&mut g, &store, &base)?;
    let reference = g.value(x).clone();
    let mut checked = 0;
    for t in [0usize, 1, 24, 47, 48] {
        let window = 320 * t..320 * t + 400;
        let mut perturbed = base.clone();
        for (i, s) in perturbed.iter_mut().enumerate() {
            if !window.contains(&i) {
                *s = rng.random_range(-1.0..1.0);
            }
        }
        let mut g = Graph::new();
        let y = enc.encode(&mut g, &store, &perturbed)?;
        let moved = g
            .value(y)
            .row(t)
            .iter()
            .zip(reference.row(t))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if moved != 0.0 {
            failures.push(format!("frame {t} moved by {moved:.3e}"));
        }
        checked += 1;
    }
    within(start.elapsed(), 10.0, &mut failures);
    Ok(Outcome::new(
        failures,
        format!("400 → 1 and 16000 → 49 frames; {checked} frames unchanged by outside perturbations"),
    ))
}

/// Finite-difference check of every parameter group of a freshly initialised
/// model on one short utterance (five frames for the micro preset).
pub fn model_gradcheck(preset: Preset, seed: u64) -> Result<Vec<GroupCheck>> {
    let cfg = ModelConfig::preset(preset);
    let (model, mut store) = WavLm::init::<f64>(&cfg, seed)?;
    // Move every parameter off its initial value (unit gains, zero biases).
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let wave: Vec<f32> = (0..GRADCHECK_SAMPLES)
        .map(|i| 0.4 * (i as f32 * 0.021).sin() + rng.random_range(-0.1f32..0.1))
        .collect();
    let frames = model
        .frames_for(wave.len())
        .ok_or_else(|| wavlm_core::Error::Length("gradcheck input too short".into()))?;
    let clusters = cfg.head.clusters as u32;
    let mask = MaskSpec::from_starts(frames, 1, &[1, 3]);
    let labels: Vec<u32> = (0..frames as u32).map(|t| (t * 3 + 1) % clusters).collect();
    finite_difference_check(&mut store, 1e-4, 48, 1e-5, |g, s| {
        model.utterance_loss(g, s, &wave, &mask, &[&labels], None)
    })
}

/// 1680 samples give five encoder frames.
const GRADCHECK_SAMPLES: usize = 1680;

/// Largest accepted relative error of a gradient group.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub(crate) fn gradient_correctness() -> Result<Outcome> {
    let start = Instant::now();
    let checks = model_gradcheck(Preset::Micro, 5)?;
    let mut failures = Vec::new();
    let worst = checks
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
        .cloned();
    for c in &checks {
        if !(c.relative_error < GRADCHECK_TOLERANCE) {
            failures.push(format!("{}: relative error {:.2e}", c.name, c.relative_error));
        }
    }
    within(start.elapsed(), 120.0, &mut failures);
    let elems: usize = checks.iter().map(|c| c.checked).sum();
    Ok(Outcome::new(
        failures,
        format!(
            "{} groups, {elems} elements; worst {}",
            checks.len(),
            worst.map_or("n/a".into(), |w| format!("{} {:.2e}", w.name, w.relative_error))
        ),
    ))
}

pub(crate) fn loss_semantics() -> Result<Outcome> {
    let cfg = ModelConfig::preset(Preset::Micro);
    let (d_model, clusters) = (cfg.transformer.d_model, cfg.head.clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let head = PredictionHead::new(&cfg.head, d_model, &mut store, &mut rng)?;
    let frames = 9;
    let hidden = Tensor::from_fn(&[frames, d_model], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<u32> = (0..frames as u32).map(|t| t % clusters as u32).collect();
    let mask = MaskSpec::from_starts(frames, 2, &[1, 5]);
    let mut failures = Vec::new();

    let mut g = Graph::new();
    let h = g.leaf(hidden.clone());
    let logp = head.codeword_logprobs(&mut g, &store, h)?;
    let empty = masked_loss(&mut g, logp, &[&labels], &MaskSpec::empty(frames))?;
    let empty_value = g.value(empty).item()?;
    if empty_value != 0.0 {
        failures.push(format!("empty-mask loss {empty_value}"));
    }
    let loss = masked_loss(&mut g, logp, &[&labels], &mask)?;
    let grads = g.backward(loss)?;
    let gh = grads
        .get(h)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[frames, d_model]));
    let leaked = (0..frames)
        .filter(|&t| !mask.contains(t))
        .any(|t| gh.row(t).iter().any(|&v| v != 0.0));
    if leaked {
        failures.push("unmasked hidden rows received gradient".into());
    }

    // Identical codewords: every prediction is uniform.
    let mut uniform_store = store.clone();
    let cw = uniform_store.get_mut(head.codewords());
    let width = cw.value.cols();
    let first: Vec<f64> = cw.value.row(0).to_vec();
    for (i, v) in cw.value.data_mut().iter_mut().enumerate() {
        *v = first[i % width];
    }
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let logp = head.codeword_logprobs(&mut g, &uniform_store, h)?;
    let loss = masked_loss(&mut g, logp, &[&labels], &mask)?;
    let uniform = g.value(loss).item()?;
    let want = mask.len() as f64 * (clusters as f64).ln();
    if (uniform - want).abs() > 1e-9 * mask.len() as f64 {
        failures.push(format!("uniform loss {uniform} vs |M|·ln C = {want}"));
    }

    // Scaling the projected vectors leaves the logits unchanged.
    let mut g = Graph::new();
    let h = g.constant(hidden);
    let p = head.proj().forward(&mut g, &store, h)?;
    let base = head.cosine_logits(&mut g, &store, p)?;
    let mut worst_scale: f64 = 0.0;
    for alpha in [1e-3, 0.7, 5.0, 1e3] {
        let scaled = g.scale(p, alpha);
        let l = head.cosine_logits(&mut g, &store, scaled)?;
        worst_scale = worst_scale.max(g.value(l).max_abs_diff(g.value(base)));
    }
    if worst_scale >= 1e-9 {
        failures.push(format!("scaled logits moved by {worst_scale:.2e}"));
    }
    Ok(Outcome::new(
        failures,
        format!(
            "empty mask 0, uniform {uniform:.9} = {}·ln {clusters}, unmasked gradients zero, scale drift {worst_scale:.1e}",
            mask.len()
        ),
    ))
}

pub(crate) fn denoising_decoupling() -> Result<Outcome> {
    let (utterances, noises) = synthetic_corpus(&CorpusConfig::default())?;
    let kmeans = KMeansConfig {
        clusters: 8,
        iters: 30,
        restarts: 1,
        seed: 0,
    };
    let (codebook, _) = fit_mfcc_codebook(&utterances, &kmeans)?;
    let frames = 49;
    let clean = WaveBatch::from_waveforms(&utterances)?;
    let label_all = |b: &WaveBatch| -> Result<Vec<_>> {
        (0..b.len())
            .map(|i| label_waveform(&codebook, &b.waveform(i), frames))
            .collect()
    };
    let before = label_all(&clean)?;
    let mix = MixConfig {
        p: 1.0,
        p_n: 0.5,
        ..MixConfig::default()
    }
    .with_seed(17);
    let inputs = denoising_step_inputs(&clean, &before, &noises, &mix, &MaskConfig::default(), 23, 320, 400)?;
    let after = label_all(&clean)?;
    let mut failures = Vec::new();
    if before != after {
        failures.push("clean labels changed after mixing".into());
    }
    if inputs.labels != before {
        failures.push("step targets differ from clean labels".into());
    }
    let from_mixed = label_all(&inputs.mixed)?;
    let differing = from_mixed.iter().zip(&before).filter(|(a, b)| a != b).count();
    let mut overlapped = 0;
    for prov in &inputs.provenance {
        let event = inputs.events.iter().find(|e| e.primary_index == prov.utterance);
        let expected = event
            .filter(|e| {
                let r = e.primary_range();
                r.start < 320 * prov.frame + 400 && 320 * prov.frame < r.end
            })
            .map(|e| e.secondary_source);
        if prov.label_source != prov.utterance
            || prov.label != before[prov.utterance].labels[prov.frame]
            || prov.overlapped_by != expected
        {
            failures.push(format!(
                "provenance mismatch at utterance {} frame {}",
                prov.utterance, prov.frame
            ));
            break;
        }
        overlapped += prov.overlapped_by.is_some() as usize;
    }
    if overlapped == 0 {
        failures.push("no masked frame overlapped a mixed region".into());
    }
    Ok(Outcome::new(
        failures,
        format!(
            "{} utterances relabelled identically; {} masked targets audited, {overlapped} inside mixed regions, all from the primary; {differing} mixed utterances would have changed labels",
            clean.len(),
            inputs.provenance.len()
        ),
    ))
}

/// Steps re-run from scratch to confirm the trajectory is reproducible.
const REPLAY_STEPS: usize = 20;

pub(crate) fn toy_learning() -> Result<Outcome> {
    let cfg = TrainConfig::default();
    let data = TrainData::load(&cfg)?;
    let start = Instant::now();
    let run = train(&cfg, &data, None)?;
    let train_secs = start.elapsed().as_secs_f64();
    let replay_cfg = TrainConfig {
        steps: REPLAY_STEPS,
        warmup_steps: REPLAY_STEPS.min(cfg.warmup_steps),
        ..cfg.clone()
    };
    let replay = train(&replay_cfg, &data, None)?;
    let mut failures = Vec::new();
    let s = run.summary;
    if !(s.ratio <= 0.7) {
        failures.push(format!("smoothed loss ratio {:.3} above 0.7", s.ratio));
    }
    let same = replay
        .records
        .iter()
        .zip(&run.records)
        .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits() && a.grad_norm.to_bits() == b.grad_norm.to_bits());
    if !same || cfg.warmup_steps < REPLAY_STEPS {
        failures.push(format!("first {REPLAY_STEPS} steps not reproduced bit-for-bit"));
    }
    Ok(Outcome::new(
        failures,
        format!(
            "{} steps in {train_secs:.1} s: loss {:.3} → {:.3} (ratio {:.3}, mean of first/last {}); {REPLAY_STEPS}-step replay identical",
            cfg.steps, s.initial, s.last, s.ratio, cfg.smoothing
        ),
    ))
}

/// Published parameter count of the base model.
pub const BASE_PARAMETERS: f64 = 94.70e6;

pub(crate) fn parameter_count() -> Result<Outcome> {
    let cfg = ModelConfig::preset(Preset::Base);
    let (_, store) = WavLm::init::<f32>(&cfg, 0)?;
    let live = store.num_elements();
    let manifest: usize = param_entries(&store).iter().map(|e| e.len).sum();
    let mut failures = Vec::new();
    if manifest != live {
        failures.push(format!("manifest lists {manifest}, live model has {live}"));
    }
    let rel = (live as f64 - BASE_PARAMETERS).abs() / BASE_PARAMETERS;
    if rel >= 0.01 {
        failures.push(format!("{:.1}% away from 94.70M", rel * 100.0));
    }
    Ok(Outcome::new(
        failures,
        format!(
            "{live} parameters ({:.2}M, {:+.2}% vs 94.70M)",
            live as f64 / 1e6,
            (live as f64 / BASE_PARAMETERS - 1.0) * 100.0
        ),
    ))
}
