use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavlm_core::labeler::PseudoLabelSequence;
use wavlm_core::mixer::MixConfig;
use wavlm_core::objective::{
    apply_mask, denoising_step_inputs, masked_loss, sample_masks, HeadConfig, MaskConfig, MaskSpec, PredictionHead,
};
use wavlm_core::signal::{synth, SynthKind, SynthParams, WaveBatch};
use wavlm_core::{Error, Graph, ParamStore, Tensor};

fn head(d_model: usize, d_e: usize, clusters: usize, seed: u64) -> (PredictionHead, ParamStore<f64>) {
    let cfg = HeadConfig {
        d_e,
        clusters,
        temperature: 0.1,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = PredictionHead::new(&cfg, d_model, &mut store, &mut rng).unwrap();
    (h, store)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn masked_fraction_matches_span_union() {
    // Interior frames are covered with probability 1 − (1 − 0.08)^10.
    let expected = 1.0 - 0.92f64.powi(10);
    let cfg = MaskConfig {
        force_min: false,
        ..MaskConfig::default()
    };
    let (mut covered, mut total) = (0, 0);
    for seed in 0..100u64 {
        let m = sample_masks(1000, &cfg, seed).unwrap();
        covered += m.indices.iter().filter(|&&t| t >= 9).count();
        total += 1000 - 9;
    }
    let frac = covered as f64 / total as f64;
    assert!((frac - expected).abs() < 0.01, "{frac} vs {expected}");
    assert!((expected - 0.5656).abs() < 1e-4);
}

#[test]
fn masks_are_deterministic_and_truncated() {
    let cfg = MaskConfig::default();
    assert_eq!(sample_masks(77, &cfg, 4).unwrap(), sample_masks(77, &cfg, 4).unwrap());
    assert_eq!(MaskSpec::from_starts(12, 10, &[9]).indices, vec![9, 10, 11]);
}

#[test]
fn apply_mask_replaces_only_masked_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random(&[6, 3], 1));
    let emb = g.constant(Tensor::new(&[3], vec![7.0, 8.0, 9.0]).unwrap());
    let same = apply_mask(&mut g, x, emb, &MaskSpec::empty(6)).unwrap();
    assert_eq!(g.value(same), g.value(x));
    let m = MaskSpec::from_starts(6, 2, &[1]);
    let y = apply_mask(&mut g, x, emb, &m).unwrap();
    for t in 0..6 {
        if m.contains(t) {
            assert_eq!(g.value(y).row(t), &[7.0, 8.0, 9.0]);
        } else {
            assert_eq!(g.value(y).row(t), g.value(x).row(t));
        }
    }
    let all = apply_mask(&mut g, x, emb, &MaskSpec::all(6)).unwrap();
    assert!((0..6).all(|t| g.value(all).row(t) == [7.0, 8.0, 9.0]));
}

#[test]
fn aligned_codeword_probability() {
    let (h, mut store) = head(2, 2, 2, 0);
    store
        .get_mut(h.codewords())
        .value
        .data_mut()
        .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let p = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let logits = h.cosine_logits(&mut g, &store, p).unwrap();
    let logp = g.log_softmax_rows(logits).unwrap();
    let p1 = g.value(logp).at(0, 0).exp();
    let want = 10f64.exp() / (10f64.exp() + 1.0);
    assert!((p1 - want).abs() < 1e-12);
    assert!((p1 - 0.9999546).abs() < 1e-7);
}

#[test]
fn identical_codewords_give_uniform_predictions() {
    let (h, mut store) = head(5, 4, 8, 1);
    let row = [0.3, -1.0, 2.0, 0.5];
    store
        .get_mut(h.codewords())
        .value
        .data_mut()
        .copy_from_slice(&row.repeat(8));
    let mut g = Graph::new();
    let x = g.constant(random(&[3, 5], 2));
    let logp = h.codeword_logprobs(&mut g, &store, x).unwrap();
    for &v in g.value(logp).data() {
        assert!((v + 8f64.ln()).abs() < 1e-12);
    }
    let m = MaskSpec::from_starts(3, 1, &[1]);
    let labels = [0, 5, 2];
    let loss = masked_loss(&mut g, logp, &[&labels], &m).unwrap();
    let l = g.value(loss).item().unwrap();
    assert!((l - 2.07944).abs() < 1e-5);
    assert!((l - 8f64.ln()).abs() < 1e-9);
    // Two label sets double the uniform loss: |M|·|K|·ln C.
    let all = MaskSpec::all(3);
    let loss = masked_loss(&mut g, logp, &[&labels, &[1, 1, 1]], &all).unwrap();
    assert!((g.value(loss).item().unwrap() - 6.0 * 8f64.ln()).abs() < 6e-9);
}

#[test]
fn probabilities_sum_to_one() {
    let (h, store) = head(6, 16, 5, 3);
    let mut g = Graph::new();
    let x = g.constant(random(&[10, 6], 4));
    let logp = h.codeword_logprobs(&mut g, &store, x).unwrap();
    for t in 0..10 {
        let s: f64 = g.value(logp).row(t).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    // A zero vector is guarded by the norm floor.
    let z = g.constant(Tensor::zeros(&[1, 6]));
    let lz = h.codeword_logprobs(&mut g, &store, z).unwrap();
    assert!(g.value(lz).all_finite());
}

#[test]
fn loss_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_fn(&[4, 3], |_| rng.random_range(-3.0..3.0)));
        let logp = g.log_softmax_rows(logits).unwrap();
        let labels: Vec<u32> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let mut starts = vec![rng.random_range(0..4usize), rng.random_range(0..4usize)];
        starts.dedup();
        if starts.len() < 2 {
            starts = vec![0, 3];
        }
        let m = MaskSpec::from_starts(4, 1, &starts);
        assert_eq!(m.len(), 2);
        let lv = masked_loss(&mut g, logp, &[&labels], &m).unwrap();
        let loss = g.value(lv).item().unwrap();

        let raw = g.value(logits);
        let mut oracle = 0.0;
        for &t in &m.indices {
            let row = raw.row(t);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[labels[t] as usize].exp() / z).ln();
        }
        assert!((loss - oracle).abs() < 1e-10, "{loss} vs {oracle}");
    }
}

#[test]
fn loss_ignores_unmasked_labels_and_rows() {
    let (h, store) = head(4, 8, 6, 5);
    let mut g = Graph::new();
    let x = g.leaf(random(&[7, 4], 6));
    let logp = h.codeword_logprobs(&mut g, &store, x).unwrap();
    let m = MaskSpec::from_starts(7, 2, &[1, 4]);
    let a = [0, 1, 2, 3, 4, 5, 0];
    let mut b = a;
    for t in (0..7).filter(|&t| !m.contains(t)) {
        b[t] = 5 - a[t];
    }
    let la = masked_loss(&mut g, logp, &[&a], &m).unwrap();
    let lb = masked_loss(&mut g, logp, &[&b], &m).unwrap();
    assert_eq!(g.value(la).item().unwrap(), g.value(lb).item().unwrap());
    assert!(g.value(la).item().unwrap() >= 0.0);

    let grads = g.backward(la).unwrap();
    let gx = grads.get(x).unwrap();
    for t in 0..7 {
        if m.contains(t) {
            assert!(gx.row(t).iter().any(|&v| v != 0.0));
        } else {
            assert!(gx.row(t).iter().all(|&v| v == 0.0), "row {t}: {:?}", gx.row(t));
        }
    }
}

#[test]
fn cosine_logits_are_scale_invariant() {
    let (h, store) = head(4, 8, 6, 7);
    let p = random(&[5, 8], 8);
    let mut g = Graph::new();
    let a = g.constant(p.clone());
    let la = h.cosine_logits(&mut g, &store, a).unwrap();
    for alpha in [1e-3, 0.5, 3.0, 1e4] {
        let b = g.constant(p.map(|v| v * alpha));
        let lb = h.cosine_logits(&mut g, &store, b).unwrap();
        assert!(g.value(la).max_abs_diff(g.value(lb)) < 1e-9, "alpha {alpha}");
    }
}

#[test]
fn empty_mask_and_bad_labels() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(random(&[3, 4], 10));
    let logp = g.log_softmax_rows(logits).unwrap();
    let loss = masked_loss(&mut g, logp, &[&[0, 1, 2]], &MaskSpec::empty(3)).unwrap();
    assert_eq!(g.value(loss).item().unwrap(), 0.0);
    let all = MaskSpec::all(3);
    assert!(matches!(
        masked_loss(&mut g, logp, &[&[0, 4, 1]], &all),
        Err(Error::InvalidValue(_))
    ));
    assert!(matches!(
        masked_loss(&mut g, logp, &[&[0, 1]], &all),
        Err(Error::Length(_))
    ));
}

#[test]
fn denoising_targets_come_from_the_primary_utterance() {
    let p = SynthParams::default();
    let kinds = [
        SynthKind::Sine,
        SynthKind::Chirp,
        SynthKind::PinkNoise,
        SynthKind::WhiteNoise,
    ];
    let waves: Vec<_> = (0..4).map(|i| synth(kinds[i], 0.5, i as u64, &p).unwrap()).collect();
    let clean = WaveBatch::from_waveforms(&waves).unwrap();
    let frames = 24;
    let labels: Vec<_> = (0..4u32)
        .map(|i| PseudoLabelSequence {
            labels: (0..frames as u32).map(|t| 100 * i + t).collect(),
            frame_rate: 50,
        })
        .collect();
    let mix = MixConfig {
        p: 1.0,
        p_n: 0.0,
        seed: 3,
        ..MixConfig::default()
    };
    let mask = MaskConfig {
        start_prob: 0.3,
        ..MaskConfig::default()
    };
    let out = denoising_step_inputs(&clean, &labels, &[], &mix, &mask, 11, 320, 400).unwrap();
    assert_eq!(out.events.len(), 4);
    assert_eq!(out.labels, labels);
    let mut overlapped = 0;
    for prov in &out.provenance {
        assert_eq!(prov.label_source, prov.utterance);
        assert_eq!(prov.label, labels[prov.utterance].labels[prov.frame]);
        assert!(out.masks[prov.utterance].contains(prov.frame));
        let event = out.events.iter().find(|e| e.primary_index == prov.utterance).unwrap();
        let r = event.primary_range();
        let hits = r.start < 320 * prov.frame + 400 && 320 * prov.frame < r.end;
        assert_eq!(prov.overlapped_by.is_some(), hits);
        if let Some(src) = prov.overlapped_by {
            assert_eq!(src, event.secondary_source);
            overlapped += 1;
        }
    }
    assert!(overlapped > 0, "no masked frame overlaps a mixed region");
    let total: usize = out.masks.iter().map(|m| m.len()).sum();
    assert_eq!(out.provenance.len(), total);
    assert!(denoising_step_inputs(&clean, &labels[..3], &[], &mix, &mask, 11, 320, 400).is_err());
}
