use serde::{Deserialize, Serialize};

use super::BucketConfig;
use crate::numeric::kernels::sigmoid;

/// Gate parameters of one layer, one entry per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGates {
    /// `[heads × d_k]` update-gate vectors.
    pub u: Vec<f64>,
    /// `[heads × d_k]` reset-gate vectors.
    pub w_vec: Vec<f64>,
    /// `[heads]` scalar multipliers of the reset branch.
    pub w_scalar: Vec<f64>,
}

/// Plain-value snapshot of the relative position bias parameters: the
/// bucket table shared by all layers and the per-layer gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketBiasState {
    pub buckets: BucketConfig,
    pub heads: usize,
    pub d_k: usize,
    /// `[heads × n]` learnable scalars.
    pub table: Vec<f64>,
    pub gates: Vec<LayerGates>,
}

impl BucketBiasState {
    /// Bias table entry for a head and offset.
    pub fn table_value(&self, head: usize, offset: i64) -> f64 {
        self.table[head * self.buckets.n + self.buckets.index(offset)]
    }

    /// `r = d + g_u·d + (1 − g_u)·w·g_r·d` with `g_u = σ(q·u)` and
    /// `g_r = σ(q·w_vec)`.
    pub fn gated_bias(&self, q: &[f64], offset: i64, head: usize, layer: usize) -> f64 {
        let gates = &self.gates[layer];
        let span = head * self.d_k..(head + 1) * self.d_k;
        gated_bias(
            q,
            self.table_value(head, offset),
            &gates.u[span.clone()],
            &gates.w_vec[span],
            gates.w_scalar[head],
        )
    }
}

/// Scalar gated bias for a query vector `q` and bucket value `d`.
pub fn gated_bias(q: &[f64], d: f64, u: &[f64], w_vec: &[f64], w_scalar: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let update = sigmoid(dot(q, u));
    let reset = sigmoid(dot(q, w_vec));
    let reset_term = w_scalar * reset * d;
    d + update * d + (1.0 - update) * reset_term
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bucket_gives_zero_bias() {
        assert_eq!(gated_bias(&[1.0, -2.0], 0.0, &[0.3, 0.1], &[0.5, 0.5], 2.0), 0.0);
    }

    #[test]
    fn half_gate_without_reset_scale() {
        // q·u = 0 → g_u = 0.5, w = 0 → r = 1.5·d.
        let r = gated_bias(&[1.0, 1.0], 0.8, &[1.0, -1.0], &[0.2, 0.7], 0.0);
        assert!((r - 1.2).abs() < 1e-15);
    }
}
