use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavlm_core::encoder::{Encoder, EncoderConfig};
use wavlm_core::{Error, Graph, ParamStore, Tensor};

fn small() -> (Encoder, ParamStore<f64>) {
    let cfg = EncoderConfig {
        channels: 8,
        d_model: 16,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&cfg, &mut store, &mut rng).unwrap();
    // Non-zero positional bias so the embedding is not trivially zero.
    let bias = store.id("encoder.pos_conv.bias").unwrap();
    store
        .get_mut(bias)
        .value
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = 0.01 * i as f64);
    (enc, store)
}

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

#[test]
fn documented_frame_counts() {
    let (enc, store) = small();
    let mut g = Graph::new();
    for (n, t) in [(400, 1), (16000, 49), (719, 1), (720, 2)] {
        let x = enc.encode(&mut g, &store, &noise(n, 1)).unwrap();
        assert_eq!(g.shape(x)[0], t, "{n} samples");
    }
    assert!(matches!(
        enc.encode(&mut g, &store, &noise(399, 1)),
        Err(Error::Length(_))
    ));
}

#[test]
fn receptive_field_locality() {
    let (enc, store) = small();
    let base = noise(4000, 2);
    let mut g = Graph::new();
    let x = enc.encode(&mut g, &store, &base).unwrap();
    let reference = g.value(x).clone();
    let frames = reference.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in [0, 3, frames - 1] {
        let window = 320 * t..320 * t + 400;
        let mut perturbed = base.clone();
        for (i, s) in perturbed.iter_mut().enumerate() {
            if !window.contains(&i) {
                *s += rng.random_range(-0.3..0.3);
            }
        }
        let mut g = Graph::new();
        let y = enc.encode(&mut g, &store, &perturbed).unwrap();
        assert_eq!(g.value(y).row(t), reference.row(t), "frame {t} moved");
        // Inside the window, a change is visible.
        let mut inside = base.clone();
        inside[320 * t + 200] += 0.5;
        let mut g = Graph::new();
        let z = enc.encode(&mut g, &store, &inside).unwrap();
        assert_ne!(g.value(z).row(t), reference.row(t));
    }
}

#[test]
fn positional_embedding_is_shift_covariant() {
    let (enc, store) = small();
    let wave = noise(64000, 4);
    let mut shifted = vec![0.1f32; 320];
    shifted.extend_from_slice(&wave);

    let run = |w: &[f32]| -> Tensor<f64> {
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, w).unwrap();
        let p = enc.project(&mut g, &store, f).unwrap();
        let y = enc.add_positional(&mut g, &store, p).unwrap();
        g.value(y).clone()
    };
    let a = run(&wave);
    let b = run(&shifted);
    assert_eq!(b.rows(), a.rows() + 1);
    let half = 64;
    let mut worst: f64 = 0.0;
    for t in half + 1..a.rows() - half {
        for (x, y) in a.row(t).iter().zip(b.row(t + 1)) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-6, "interior difference {worst}");
}

#[test]
fn positional_output_keeps_length() {
    let (enc, store) = small();
    for frames in [1, 2, 49, 130] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[frames, 8], |i| (i as f64 * 0.37).sin()));
        let y = enc.project_and_posembed(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[frames, 16]);
    }
}
