//! WebAssembly bindings for the static demo page in `www/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;
use wavlm_core::mixer::{simulate_batch, MixConfig, MixEvent};
use wavlm_core::signal::{synth, SynthKind, SynthParams, WaveBatch};
use wavlm_core::transformer::{gated_bias, BucketConfig, Transformer, TransformerConfig};
use wavlm_core::{Graph, ParamStore, Tensor};

fn js(e: wavlm_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Distance prior used for the demo bias table: `−slope · (bucket distance)/(n/2)`.
fn table_value(cfg: &BucketConfig, bucket: usize, slope: f64) -> f64 {
    let half = cfg.n / 2;
    -slope * (bucket % half) as f64 / half as f64
}

/// Bucket of every offset in `lo..=hi`.
#[wasm_bindgen]
pub fn bucket_curve(n: usize, m: usize, lo: i32, hi: i32) -> Result<Vec<u32>, JsError> {
    let cfg = BucketConfig { n, m };
    cfg.validate().map_err(js)?;
    Ok((lo..=hi).map(|o| cfg.index(o as i64) as u32).collect())
}

/// Gated relative-position bias for every offset in `lo..=hi`, for a query
/// whose update and reset gate pre-activations are `qu` and `qw`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn gated_bias_curve(
    n: usize,
    m: usize,
    lo: i32,
    hi: i32,
    slope: f64,
    qu: f64,
    qw: f64,
    w_scalar: f64,
) -> Result<Vec<f64>, JsError> {
    let cfg = BucketConfig { n, m };
    cfg.validate().map_err(js)?;
    Ok((lo..=hi)
        .map(|o| {
            let d = table_value(&cfg, cfg.index(o as i64), slope);
            // One-dimensional query and gate vectors reproduce q·u and q·w.
            gated_bias(&[1.0], d, &[qu], &[qw], w_scalar)
        })
        .collect())
}

#[derive(Serialize)]
struct MixDemo {
    clean: Vec<Vec<f32>>,
    mixed: Vec<Vec<f32>>,
    events: Vec<MixEvent>,
}

/// Mixes four synthetic 0.25 s utterances (plus two noise clips) and returns
/// `{clean, mixed, events}` as JSON.
#[wasm_bindgen]
pub fn simulate_mix(seed: u64, p: f64, p_n: f64) -> Result<String, JsError> {
    let params = SynthParams {
        amplitude: 0.5,
        ..SynthParams::default()
    };
    let kinds = [SynthKind::Sine, SynthKind::Chirp, SynthKind::PinkNoise, SynthKind::Sine];
    let waves = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let p = SynthParams {
                frequency: 220.0 * (i + 1) as f64,
                ..params
            };
            synth(k, 0.25, i as u64, &p)
        })
        .collect::<wavlm_core::Result<Vec<_>>>()
        .map_err(js)?;
    let noises = vec![
        synth(SynthKind::WhiteNoise, 0.1, 10, &params).map_err(js)?,
        synth(SynthKind::PinkNoise, 0.1, 11, &params).map_err(js)?,
    ];
    let batch = WaveBatch::from_waveforms(&waves).map_err(js)?;
    let cfg = MixConfig {
        p,
        p_n,
        seed,
        ..MixConfig::default()
    };
    let out = simulate_batch(&batch, &noises, &cfg).map_err(js)?;
    let demo = MixDemo {
        clean: batch.utterances().to_vec(),
        mixed: out.mixed.utterances().to_vec(),
        events: out.events,
    };
    serde_json::to_string(&demo).map_err(|e| JsError::new(&e.to_string()))
}

/// Row-major `frames × frames` attention weights of head 0 for random input
/// frames, with the demo distance prior in the bias table.
#[wasm_bindgen]
pub fn attention_heatmap(frames: usize, seed: u64, slope: f64, w_scalar: f64) -> Result<Vec<f64>, JsError> {
    heatmap(frames, seed, slope, w_scalar).map_err(js)
}

fn heatmap(frames: usize, seed: u64, slope: f64, w_scalar: f64) -> wavlm_core::Result<Vec<f64>> {
    if frames == 0 || frames > 200 {
        return Err(wavlm_core::Error::InvalidValue(format!(
            "frames must be in 1..=200, got {frames}"
        )));
    }
    let cfg = TransformerConfig {
        d_model: 16,
        heads: 2,
        d_ff: 64,
        layers: 1,
        ..TransformerConfig::base()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let t = Transformer::new(&cfg, &mut store, &mut rng)?;
    let n = cfg.buckets.n;
    let table = store.get_mut(t.bias_table());
    for (i, v) in table.value.data_mut().iter_mut().enumerate() {
        *v = table_value(&cfg.buckets, i % n, slope);
    }
    for p in store.iter_mut().filter(|p| p.name.ends_with(".gate_scale")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = w_scalar);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[frames, cfg.d_model], |_| rng.random_range(-1.0..1.0)));
    let out = t.attention(&mut g, &store, x, 0)?;
    Ok(g.value(out.weights[0]).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_have_range_length() {
        assert_eq!(bucket_curve(320, 800, -1000, 1000).ok().unwrap().len(), 2001);
        let c = gated_bias_curve(320, 800, -5, 5, 4.0, 0.0, 0.0, 1.0).ok().unwrap();
        assert_eq!(c.len(), 11);
        assert_eq!(c[5], 0.0);
        assert!(c[0] < 0.0);
    }

    #[test]
    fn heatmap_rows_are_distributions() {
        let w = heatmap(12, 1, 3.0, 0.5).unwrap();
        assert_eq!(w.len(), 144);
        for row in w.chunks(12) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn mixing_returns_json() {
        let s = simulate_mix(3, 1.0, 0.5).ok().unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["events"].as_array().unwrap().len(), 4);
        assert_eq!(v["mixed"].as_array().unwrap().len(), 4);
    }
}
