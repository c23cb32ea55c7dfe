use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavlm_core::numeric::kernels::sigmoid;
use wavlm_core::transformer::stability::{naive_path, stable_path};
use wavlm_core::transformer::{bucket_index, gated_bias, BucketConfig, Transformer, TransformerConfig};
use wavlm_core::{Graph, ParamStore, Tensor};

fn tiny(layers: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        heads: 2,
        d_ff: 64,
        layers,
        ..TransformerConfig::base()
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Perturbs every parameter so gates, norms and biases are all non-trivial.
fn build(cfg: &TransformerConfig, seed: u64) -> (Transformer, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let t = Transformer::new(cfg, &mut store, &mut rng).unwrap();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    (t, store)
}

/// Plain-loop attention of one layer, computed independently of the tape.
#[allow(clippy::needless_range_loop)]
fn naive_attention(t: &Transformer, store: &ParamStore<f64>, h: &Tensor<f64>, layer: usize) -> Vec<f64> {
    let cfg = t.config();
    let (rows, d) = (h.rows(), cfg.d_model);
    let d_k = cfg.d_k();
    let state = t.bias_state(store);
    let linear = |(w, b): (wavlm_core::numeric::ParamId, wavlm_core::numeric::ParamId), x: &[f64]| -> Vec<f64> {
        let (w, b) = (store.value(w), store.value(b));
        let mut out = vec![0.0; rows * w.cols()];
        for i in 0..rows {
            for o in 0..w.cols() {
                let mut acc = b.data()[o];
                for c in 0..w.rows() {
                    acc += x[i * w.rows() + c] * w.at(c, o);
                }
                out[i * w.cols() + o] = acc;
            }
        }
        out
    };
    let [pq, pk, pv] = t.qkv(layer);
    let (q, k, v) = (linear(pq, h.data()), linear(pk, h.data()), linear(pv, h.data()));
    let mut cat = vec![0.0; rows * d];
    for head in 0..cfg.heads {
        let col = |m: &Vec<f64>, i: usize| m[i * d + head * d_k..i * d + (head + 1) * d_k].to_vec();
        for i in 0..rows {
            let qi = col(&q, i);
            let scores: Vec<f64> = (0..rows)
                .map(|j| {
                    let dot: f64 = qi.iter().zip(col(&k, j)).map(|(a, b)| a * b).sum();
                    dot / (d_k as f64).sqrt() + state.gated_bias(&qi, i as i64 - j as i64, head, layer)
                })
                .collect();
            let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..rows {
                let a = e[j] / z;
                for (c, vj) in col(&v, j).iter().enumerate() {
                    cat[i * d + head * d_k + c] += a * vj;
                }
            }
        }
    }
    linear(t.output_projection(layer), &cat)
}

#[test]
fn bucket_examples() {
    let cfg = BucketConfig::default();
    for (off, want) in [
        (0, 0),
        (-50, 50),
        (50, 210),
        (-1000, 159),
        (1000, 319),
        (-160, 104),
        (160, 264),
        (-799, 159),
    ] {
        assert_eq!(bucket_index(off, &cfg), want, "offset {off}");
    }
}

#[test]
fn gated_bias_examples_and_scalar_oracle() {
    assert_eq!(gated_bias(&[0.3, -1.0], 0.0, &[1.0, 2.0], &[0.5, 0.1], 3.0), 0.0);
    // q·u = 0 and w_scalar = 0 → 1.5·d.
    assert!((gated_bias(&[1.0, 1.0], 2.0, &[1.0, -1.0], &[0.4, 0.9], 0.0) - 3.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (d, s) = (rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
        let gu = 1.0 / (1.0 + (-q.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()).exp());
        let gr = 1.0 / (1.0 + (-q.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).exp());
        let r_tilde = s * gr * d;
        let oracle = d + gu * d + (1.0 - gu) * r_tilde;
        assert!((gated_bias(&q, d, &u, &w, s) - oracle).abs() < 1e-12);
    }
    assert_eq!(sigmoid(0.0), 0.5);
}

#[test]
fn bias_is_translation_invariant() {
    let (t, store) = build(&tiny(1), 2);
    let state = t.bias_state(&store);
    let q: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    for (i, j) in [(3i64, 7i64), (10, 2), (0, 0)] {
        for s in [1, 17, 400] {
            assert_eq!(
                state.gated_bias(&q, i - j, 1, 0),
                state.gated_bias(&q, (i + s) - (j + s), 1, 0)
            );
        }
    }
}

#[test]
fn stable_attention_matches_naive_oracle() {
    let cfg = tiny(1);
    let (t, store) = build(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for rows in [1, 2, 7, 13] {
        let h = random(&[rows, 16], 1.5, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let out = t.attention(&mut g, &store, x, 0).unwrap();
        let oracle = naive_attention(&t, &store, &h, 0);
        let diff = g
            .value(out.output)
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "T={rows}: diff {diff}");
        for w in &out.weights {
            let wv = g.value(*w);
            for r in 0..rows {
                assert!((wv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_frame_attends_to_itself() {
    let (t, store) = build(&tiny(1), 3);
    let mut g = Graph::new();
    let h = Tensor::from_fn(&[1, 16], |i| i as f64 * 0.1);
    let x = g.constant(h.clone());
    let out = t.attention(&mut g, &store, x, 0).unwrap();
    for w in &out.weights {
        assert_eq!(g.value(*w).data(), &[1.0]);
    }
    // Output is the projected value vector.
    let oracle = naive_attention(&t, &store, &h, 0);
    assert!(g
        .value(out.output)
        .data()
        .iter()
        .zip(&oracle)
        .all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn zero_bias_identical_keys_give_uniform_weights() {
    let (t, mut store) = build(&tiny(1), 5);
    let table = t.bias_table();
    store.get_mut(table).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let [_, (kw, kb), _] = t.qkv(0);
    store.get_mut(kw).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    store
        .get_mut(kb)
        .value
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v = i as f64 * 0.1);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.constant(random(&[6, 16], 1.0, &mut rng));
    let out = t.attention(&mut g, &store, x, 0).unwrap();
    for w in &out.weights {
        assert!(g.value(*w).data().iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-12));
    }
}

#[test]
fn zero_output_projections_reduce_layer_to_norms() {
    let cfg = tiny(1);
    let (t, mut store) = build(&cfg, 11);
    for (w, b) in [t.output_projection(0), t.ffn_output(0)] {
        for id in [w, b] {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = random(&[5, 16], 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(h.clone());
    let y = t.encoder_layer(&mut g, &store, x, 0, None).unwrap();
    // Both residual branches vanish: y = LN_ffn(LN_attn(h)).
    let attn_norm = store
        .by_name("transformer.layer0.attn_norm.gain")
        .unwrap()
        .value
        .clone();
    let attn_bias = store
        .by_name("transformer.layer0.attn_norm.bias")
        .unwrap()
        .value
        .clone();
    let ffn_norm = store.by_name("transformer.layer0.ffn_norm.gain").unwrap().value.clone();
    let ffn_bias = store.by_name("transformer.layer0.ffn_norm.bias").unwrap().value.clone();
    let once = wavlm_core::numeric::kernels::layer_norm(&h, &attn_norm, &attn_bias).unwrap();
    let twice = wavlm_core::numeric::kernels::layer_norm(&once, &ffn_norm, &ffn_bias).unwrap();
    assert!(g.value(y).max_abs_diff(&twice) < 1e-12);
}

#[test]
fn stack_preserves_shape_and_norm_order_flag() {
    for norm_first in [false, true] {
        let cfg = TransformerConfig { norm_first, ..tiny(2) };
        let (t, store) = build(&cfg, 1);
        for rows in [1, 3, 9] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(&[rows, 16], |i| (i as f64).cos()));
            let y = t.encoder_stack(&mut g, &store, x, None).unwrap();
            assert_eq!(g.shape(y), &[rows, 16]);
            assert!(g.value(y).all_finite());
        }
    }
}

#[test]
fn shared_gates_flag_registers_one_set() {
    let cfg = TransformerConfig {
        share_gates: true,
        ..tiny(3)
    };
    let (_, store) = build(&cfg, 1);
    let gate_params = store.iter().filter(|p| p.name.contains("gate_")).count();
    assert_eq!(gate_params, 3);
    let (_, store) = build(&tiny(3), 1);
    assert_eq!(store.iter().filter(|p| p.name.contains("gate_")).count(), 9);
    assert_eq!(store.iter().filter(|p| p.name.contains("bias_table")).count(), 1);
}

/// Relative error of the reverse-mode gradient of a scalar function of the
/// stack output against central differences, per parameter.
#[test]
fn stack_gradient_matches_finite_differences() {
    let cfg = tiny(2);
    let (t, mut store) = build(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = random(&[5, 16], 1.0, &mut rng);
    let weights = random(&[5, 16], 1.0, &mut rng);
    let eval = |store: &ParamStore<f64>| -> (f64, Graph<f64>, wavlm_core::Var) {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let y = t.encoder_stack(&mut g, store, x, None).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(y, w).unwrap();
        let s = g.sum(p);
        (g.value(s).item().unwrap(), g, s)
    };
    let (_, g, s) = eval(&store);
    store.zero_grads();
    g.backward_into(s, &mut store).unwrap();
    let eps = 1e-4;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.id(&name).unwrap();
        let analytic = store.get(id).grad.clone();
        let n = analytic.len();
        let (mut num2, mut diff2, mut ana2) = (0.0, 0.0, 0.0);
        for e in (0..n).step_by((n / 12).max(1)) {
            let orig = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + eps;
            let up = eval(&store).0;
            store.get_mut(id).value.data_mut()[e] = orig - eps;
            let down = eval(&store).0;
            store.get_mut(id).value.data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.data()[e];
            num2 += fd * fd;
            ana2 += a * a;
            diff2 += (fd - a) * (fd - a);
        }
        // Groups with a vanishing gradient (key biases) are compared absolutely.
        let scale = num2.sqrt().max(ana2.sqrt()).max(1e-5);
        let rel = diff2.sqrt() / scale;
        assert!(rel < 1e-4, "{name}: relative error {rel}");
    }
}

#[test]
fn overflow_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    let q = Tensor::from_fn(&[6, d], |_| rng.random_range(-1.0..1.0) * 400.0);
    let k = Tensor::from_fn(&[6, d], |_| rng.random_range(-1.0..1.0) * 400.0);
    let naive = naive_path(&q, &k, None);
    assert!(naive.logits.max_abs > 1e4);
    assert!(naive.exponentials.any_flagged());
    let stable = stable_path(&q, &k, 32.0);
    assert!(!stable.pre_bias_args.any_flagged());
    assert!(!stable.scaled_logits.any_flagged());
    assert!(stable.max_pre_bias_arg <= 0.0);
}
