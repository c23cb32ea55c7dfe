//! Half-precision range diagnostics for attention logits.
//!
//! Computations run in `f64`; every intermediate is checked against the
//! largest finite half-precision value to see which evaluation order would
//! overflow on fp16 hardware.

use crate::numeric::Tensor;

/// Largest finite IEEE half-precision value.
pub const HALF_MAX: f64 = 65504.0;

pub fn exceeds_half_range(x: f64) -> bool {
    !x.is_finite() || x.abs() > HALF_MAX
}

/// Range summary of a set of intermediates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RangeReport {
    pub values: usize,
    pub flagged: usize,
    pub non_finite: usize,
    pub max_abs: f64,
}

impl RangeReport {
    fn record(&mut self, x: f64) {
        self.values += 1;
        if !x.is_finite() {
            self.non_finite += 1;
        } else {
            self.max_abs = self.max_abs.max(x.abs());
        }
        if exceeds_half_range(x) {
            self.flagged += 1;
        }
    }

    /// Exponent arguments: a large negative value flushes `exp` to zero,
    /// which is exact, so only the upper side is flagged.
    fn record_exponent_arg(&mut self, x: f64) {
        self.values += 1;
        if !x.is_finite() {
            self.non_finite += 1;
        } else {
            self.max_abs = self.max_abs.max(x.abs());
        }
        if x.is_nan() || x > HALF_MAX {
            self.flagged += 1;
        }
    }

    pub fn any_flagged(&self) -> bool {
        self.flagged > 0
    }
}

/// Intermediates of the direct evaluation `exp(q·k/√d + r)` for one head.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NaiveReport {
    /// `q_i·k_j/√d`
    pub logits: RangeReport,
    /// `q_i·k_j/√d + r`, the exponent argument.
    pub exponent_args: RangeReport,
    /// `exp(q_i·k_j/√d + r)`
    pub exponentials: RangeReport,
}

/// Intermediates of the translated evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StableReport {
    /// `q_i/(c√d)·k_j`
    pub scaled_logits: RangeReport,
    /// `(q_i/(c√d)·k_j − max_j′ …)·c`, the exponent before the bias is added.
    pub pre_bias_args: RangeReport,
    /// Largest pre-bias argument; never above zero.
    pub max_pre_bias_arg: f64,
}

fn dims(q: &Tensor<f64>, k: &Tensor<f64>) -> (usize, usize, usize) {
    assert_eq!(q.cols(), k.cols(), "query and key widths differ");
    (q.rows(), k.rows(), q.cols())
}

/// `q[T×d]`, `k[T×d]`, optional bias `[T×T]`.
pub fn naive_path(q: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> NaiveReport {
    let (tq, tk, d) = dims(q, k);
    let mut rep = NaiveReport::default();
    let root = (d as f64).sqrt();
    for i in 0..tq {
        for j in 0..tk {
            let dot: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            let logit = dot / root;
            rep.logits.record(logit);
            let r = bias.map_or(0.0, |b| b.at(i, j));
            rep.exponent_args.record_exponent_arg(logit + r);
            rep.exponentials.record((logit + r).exp());
        }
    }
    rep
}

pub fn stable_path(q: &Tensor<f64>, k: &Tensor<f64>, c: f64) -> StableReport {
    let (tq, tk, d) = dims(q, k);
    let mut rep = StableReport {
        max_pre_bias_arg: f64::NEG_INFINITY,
        ..StableReport::default()
    };
    let denom = c * (d as f64).sqrt();
    for i in 0..tq {
        let qs: Vec<f64> = q.row(i).iter().map(|v| v / denom).collect();
        let scaled: Vec<f64> = (0..tk)
            .map(|j| qs.iter().zip(k.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &s in &scaled {
            rep.scaled_logits.record(s);
            let arg = (s - max) * c;
            rep.pre_bias_args.record_exponent_arg(arg);
            rep.max_pre_bias_arg = rep.max_pre_bias_arg.max(arg);
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_logits_flag_only_the_naive_path() {
        // q·k/√d = 1e5 for the diagonal.
        let d = 4;
        let val = (1e5 * (d as f64).sqrt() / d as f64).sqrt();
        let q = Tensor::from_fn(&[3, d], |_| val);
        let k = q.clone();
        let naive = naive_path(&q, &k, None);
        assert!(naive.logits.any_flagged());
        assert!(naive.exponentials.non_finite > 0);
        let stable = stable_path(&q, &k, 32.0);
        assert!(!stable.scaled_logits.any_flagged());
        assert!(!stable.pre_bias_args.any_flagged());
        assert!(stable.max_pre_bias_arg <= 0.0);

        // Mixed signs: arguments far below zero underflow harmlessly.
        let q = Tensor::from_fn(&[4, d], |i| if i % 3 == 0 { -val } else { val });
        let naive = naive_path(&q, &k.clone(), None);
        assert!(naive.exponentials.any_flagged());
        let stable = stable_path(&q, &q, 32.0);
        assert!(stable.pre_bias_args.max_abs > HALF_MAX);
        assert!(!stable.pre_bias_args.any_flagged());
        assert!(stable.max_pre_bias_arg <= 0.0);
    }
}
