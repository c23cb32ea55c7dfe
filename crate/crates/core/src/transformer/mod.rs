//! Transformer encoder with gated relative position bias.
//!
//! Attention logits are `q_i·k_j/√d_k + r_{i−j}` where `r` comes from a
//! bucketed scalar table shared by every layer, modulated per query by an
//! update gate and a reset gate. The softmax is evaluated in the translated
//! form `exp((q_i/(c√d_k)·k_j − max_j′ …)·c + r)` so the pre-bias exponent
//! arguments never exceed zero.

mod buckets;
mod gated;
pub mod stability;

pub use buckets::{bucket_index, BucketConfig};
pub use gated::{gated_bias, BucketBiasState, LayerGates};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{randn, LayerNorm, Linear};
use crate::numeric::kernels::SOFTMAX_SCALE;
use crate::numeric::{Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub buckets: BucketConfig,
    /// Pre-layer-norm blocks instead of the default post-layer-norm.
    #[serde(default)]
    pub norm_first: bool,
    /// One set of gate parameters for all layers.
    #[serde(default)]
    pub share_gates: bool,
    /// Translation scale `c` of the stabilised softmax.
    #[serde(default = "default_softmax_scale")]
    pub softmax_scale: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub layer_drop: f64,
}

fn default_softmax_scale() -> f64 {
    SOFTMAX_SCALE
}

impl TransformerConfig {
    pub fn base() -> Self {
        TransformerConfig {
            d_model: 768,
            heads: 8,
            d_ff: 3072,
            layers: 12,
            buckets: BucketConfig::default(),
            norm_first: false,
            share_gates: false,
            softmax_scale: SOFTMAX_SCALE,
            dropout: 0.0,
            layer_drop: 0.0,
        }
    }

    /// 1024 dims split into 16 heads of 64; 12 heads would not divide 1024.
    pub fn large() -> Self {
        TransformerConfig {
            d_model: 1024,
            heads: 16,
            d_ff: 4096,
            layers: 24,
            ..Self::base()
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        self.buckets.validate()?;
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 || self.layers == 0 {
            return Err(Error::Config("d_ff and layers must be positive".into()));
        }
        if !(self.softmax_scale > 0.0) {
            return Err(Error::Config("softmax scale must be positive".into()));
        }
        for (name, p) in [("dropout", self.dropout), ("layer_drop", self.layer_drop)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Gates {
    /// `[d_k × heads]`
    u: ParamId,
    /// `[d_k × heads]`
    w_vec: ParamId,
    /// `[1 × heads]`
    w_scalar: ParamId,
}

impl Gates {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d_k = cfg.d_k();
        let std = 1.0 / (d_k as f64).sqrt();
        Ok(Gates {
            u: store.add(format!("{prefix}.gate_u"), randn(&[d_k, cfg.heads], std, rng).cast())?,
            w_vec: store.add(format!("{prefix}.gate_w"), randn(&[d_k, cfg.heads], std, rng).cast())?,
            w_scalar: store.add(format!("{prefix}.gate_scale"), Tensor::full(&[1, cfg.heads], T::one()))?,
        })
    }
}

#[derive(Debug, Clone)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    gates: Gates,
    attn_norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ffn_norm: LayerNorm,
}

/// Attention result with the per-head weight matrices `[T × T]`.
#[derive(Debug, Clone)]
pub struct AttentionOut {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Parameter handles of the Transformer stack.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: TransformerConfig,
    bias_table: ParamId,
    norm: LayerNorm,
    layers: Vec<Layer>,
}

impl Transformer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        config: &TransformerConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let table = randn(&[config.heads, config.buckets.n], 0.1, rng);
        let bias_table = store.add("transformer.shared.bias_table", table.cast())?;
        let norm = LayerNorm::new(store, "transformer.norm", d)?;
        let shared = if config.share_gates {
            Some(Gates::new(store, "transformer.shared", config, rng)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("transformer.layer{i}");
            let gates = match shared {
                Some(g) => g,
                None => Gates::new(store, &format!("{p}.attn"), config, rng)?,
            };
            layers.push(Layer {
                q: Linear::new(store, &format!("{p}.attn.q"), d, d, rng)?,
                k: Linear::new(store, &format!("{p}.attn.k"), d, d, rng)?,
                v: Linear::new(store, &format!("{p}.attn.v"), d, d, rng)?,
                o: Linear::new(store, &format!("{p}.attn.o"), d, d, rng)?,
                gates,
                attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d)?,
                fc1: Linear::new(store, &format!("{p}.ffn.fc1"), d, config.d_ff, rng)?,
                fc2: Linear::new(store, &format!("{p}.ffn.fc2"), config.d_ff, d, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
            });
        }
        Ok(Transformer {
            config: config.clone(),
            bias_table,
            norm,
            layers,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn bias_table(&self) -> ParamId {
        self.bias_table
    }

    /// Handles of the output projection `(weight, bias)` of a layer.
    pub fn output_projection(&self, layer: usize) -> (ParamId, ParamId) {
        let o = self.layers[layer].o;
        (o.weight, o.bias)
    }

    /// Handles of the second feed-forward projection `(weight, bias)`.
    pub fn ffn_output(&self, layer: usize) -> (ParamId, ParamId) {
        let f = self.layers[layer].fc2;
        (f.weight, f.bias)
    }

    /// Handles of the query, key and value projections as `(weight, bias)`.
    pub fn qkv(&self, layer: usize) -> [(ParamId, ParamId); 3] {
        let l = &self.layers[layer];
        [(l.q.weight, l.q.bias), (l.k.weight, l.k.bias), (l.v.weight, l.v.bias)]
    }

    /// Snapshot of the bucket table and gate parameters as plain values.
    pub fn bias_state<T: Real>(&self, store: &ParamStore<T>) -> BucketBiasState {
        let heads = self.config.heads;
        let d_k = self.config.d_k();
        let to_f64 = |id: ParamId| -> Vec<f64> { store.value(id).data().iter().map(|v| v.as_f64()).collect() };
        // Gate vectors are stored column-per-head; regroup as row-per-head.
        let by_head = |id: ParamId| -> Vec<f64> {
            let raw = to_f64(id);
            let mut out = vec![0.0; heads * d_k];
            for h in 0..heads {
                for c in 0..d_k {
                    out[h * d_k + c] = raw[c * heads + h];
                }
            }
            out
        };
        BucketBiasState {
            buckets: self.config.buckets,
            heads,
            d_k,
            table: to_f64(self.bias_table),
            gates: self
                .layers
                .iter()
                .map(|l| LayerGates {
                    u: by_head(l.gates.u),
                    w_vec: by_head(l.gates.w_vec),
                    w_scalar: to_f64(l.gates.w_scalar),
                })
                .collect(),
        }
    }

    /// Multi-head self-attention of layer `layer` over `h[T × d_model]`.
    pub fn attention<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        layer: usize,
    ) -> Result<AttentionOut> {
        let cfg = &self.config;
        let l = &self.layers[layer];
        let frames = g.shape(h)[0];
        let d_k = cfg.d_k();
        let c = cfg.softmax_scale;
        let q = l.q.forward(g, store, h)?;
        let k = l.k.forward(g, store, h)?;
        let v = l.v.forward(g, store, h)?;
        let table = g.param(store, self.bias_table);
        let gate_u = g.param(store, l.gates.u);
        let gate_w = g.param(store, l.gates.w_vec);
        let gate_s = g.param(store, l.gates.w_scalar);
        let buckets = cfg.buckets.matrix(frames);

        let mut heads = Vec::with_capacity(cfg.heads);
        let mut weights = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = g.slice_cols(q, head * d_k, d_k)?;
            let kh = g.slice_cols(k, head * d_k, d_k)?;
            let vh = g.slice_cols(v, head * d_k, d_k)?;

            // Content gates, one value per query.
            let u = g.slice_cols(gate_u, head, 1)?;
            let w = g.slice_cols(gate_w, head, 1)?;
            let s = g.slice_cols(gate_s, head, 1)?;
            let qu = g.matmul(qh, u)?;
            let update = g.sigmoid(qu);
            let qw = g.matmul(qh, w)?;
            let reset = g.sigmoid(qw);
            let keep = g.affine(update, -1.0, 1.0);
            let reset_branch = g.mul(keep, reset)?;
            let reset_branch = g.mul(reset_branch, s)?;
            let gain = g.add(update, reset_branch)?;
            let gain = g.affine(gain, 1.0, 1.0);

            let index = buckets.iter().map(|&b| head * cfg.buckets.n + b).collect();
            let d = g.gather(table, index, &[frames, frames])?;
            let r = g.mul(d, gain)?;

            let q_scaled = g.scale(qh, 1.0 / (c * (d_k as f64).sqrt()));
            let kt = g.transpose(kh)?;
            let scores = g.matmul(q_scaled, kt)?;
            let a = g.softmax_rows(scores, Some(r), c)?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = g.concat_cols(&heads)?;
        let output = l.o.forward(g, store, cat)?;
        Ok(AttentionOut { output, weights })
    }

    fn dropout<T: Real>(&self, g: &mut Graph<T>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = T::lit(1.0 / (1.0 - p));
                let mask = Tensor::from_fn(g.shape(x), |_| if rng.random::<f64>() < p { T::zero() } else { keep });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    fn feed_forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, l: &Layer, x: Var) -> Result<Var> {
        let a = l.fc1.forward(g, store, x)?;
        let a = g.gelu(a);
        l.fc2.forward(g, store, a)
    }

    /// One encoder layer: attention and feed-forward sub-blocks, each with a
    /// residual connection and layer norm.
    pub fn encoder_layer<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        layer: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let l = &self.layers[layer];
        if self.config.norm_first {
            let n = l.attn_norm.forward(g, store, h)?;
            let a = self.attention(g, store, n, layer)?.output;
            let a = self.dropout(g, a, rng.as_deref_mut())?;
            let h = g.add(h, a)?;
            let n = l.ffn_norm.forward(g, store, h)?;
            let f = self.feed_forward(g, store, l, n)?;
            let f = self.dropout(g, f, rng.as_deref_mut())?;
            g.add(h, f)
        } else {
            let a = self.attention(g, store, h, layer)?.output;
            let a = self.dropout(g, a, rng.as_deref_mut())?;
            let h = g.add(h, a)?;
            let h = l.attn_norm.forward(g, store, h)?;
            let f = self.feed_forward(g, store, l, h)?;
            let f = self.dropout(g, f, rng)?;
            let h = g.add(h, f)?;
            l.ffn_norm.forward(g, store, h)
        }
    }

    /// The full stack. Post-norm applies the shared input norm first,
    /// pre-norm applies it after the last layer.
    pub fn encoder_stack<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut x = if self.config.norm_first {
            h
        } else {
            self.norm.forward(g, store, h)?
        };
        for layer in 0..self.layers.len() {
            if let Some(r) = rng.as_deref_mut() {
                if self.config.layer_drop > 0.0 && r.random::<f64>() < self.config.layer_drop {
                    continue;
                }
            }
            x = self.encoder_layer(g, store, x, layer, rng.as_deref_mut())?;
        }
        if self.config.norm_first {
            x = self.norm.forward(g, store, x)?;
        }
        Ok(x)
    }
}
