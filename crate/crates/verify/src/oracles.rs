//! Reference implementations written independently of the core kernels.

use num_bigint::BigUint;
use wavlm_core::numeric::ParamId;
use wavlm_core::transformer::Transformer;
use wavlm_core::{Graph, ParamStore, Result, Tensor, Var};

/// Bucket index in exact integer arithmetic.
///
/// In the logarithmic branch the bucket is `n/4 + j` for the largest `j` with
/// `n/4 · ln(d/(n/4)) / ln(m/(n/4)) ≥ j`, i.e. `d^{n/4} · (n/4)^j ≥ m^j · (n/4)^{n/4}`.
pub fn exact_bucket(offset: i64, n: usize, m: usize) -> usize {
    let quarter = n / 4;
    let half = n / 2;
    let dist = offset.unsigned_abs() as usize;
    let base = if dist < quarter {
        dist
    } else if dist < m {
        let q = BigUint::from(quarter);
        let lhs_base = BigUint::from(dist).pow(quarter as u32);
        let rhs_base = q.pow(quarter as u32);
        let holds = |j: u32| lhs_base.clone() * q.pow(j) >= BigUint::from(m).pow(j) * &rhs_base;
        // `holds` is monotone in j; find the last j that satisfies it.
        let (mut lo, mut hi) = (0u32, half as u32);
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if holds(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (quarter + lo as usize).min(half - 1)
    } else {
        half - 1
    };
    if offset > 0 {
        base + half
    } else {
        base
    }
}

fn affine(store: &ParamStore<f64>, (w, b): (ParamId, ParamId), x: &[f64], rows: usize) -> Vec<f64> {
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
}

/// Self-attention of one layer with the plain `softmax(q·k/√d + r)` loops.
#[allow(clippy::needless_range_loop)]
pub fn naive_attention(t: &Transformer, store: &ParamStore<f64>, h: &Tensor<f64>, layer: usize) -> Vec<f64> {
    let cfg = t.config();
    let (rows, d, d_k) = (h.rows(), cfg.d_model, cfg.d_k());
    let state = t.bias_state(store);
    let [pq, pk, pv] = t.qkv(layer);
    let q = affine(store, pq, h.data(), rows);
    let k = affine(store, pk, h.data(), rows);
    let v = affine(store, pv, h.data(), rows);
    let mut cat = vec![0.0; rows * d];
    for head in 0..cfg.heads {
        let col = |m: &[f64], i: usize| m[i * d + head * d_k..i * d + (head + 1) * d_k].to_vec();
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
                for (c, vj) in col(&v, j).iter().enumerate() {
                    cat[i * d + head * d_k + c] += e[j] / z * vj;
                }
            }
        }
    }
    affine(store, t.output_projection(layer), &cat, rows)
}

/// Finite-difference agreement of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub relative_error: f64,
}

/// Compares reverse-mode gradients with central differences.
///
/// Per group, the error is `‖g − fd‖ / max(‖g‖, ‖fd‖, floor)` over up to
/// `samples` evenly spaced elements; the floor keeps groups whose true
/// gradient vanishes (key biases under softmax) from dividing by zero.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    eps: f64,
    samples: usize,
    floor: f64,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> Result<Vec<GroupCheck>> {
    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        g.value(l).item()
    };
    store.zero_grads();
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward_into(l, store)?;

    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let id = store.id(&name).expect("name from the store");
        let analytic = store.get(id).grad.clone();
        let n = analytic.len();
        let step = n.div_ceil(samples).max(1);
        let (mut diff2, mut fd2, mut an2, mut checked) = (0.0, 0.0, 0.0, 0);
        for e in (step / 2..n).step_by(step) {
            let orig = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + eps;
            let up = value(store)?;
            store.get_mut(id).value.data_mut()[e] = orig - eps;
            let down = value(store)?;
            store.get_mut(id).value.data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * eps);
            let a = analytic.data()[e];
            diff2 += (fd - a) * (fd - a);
            fd2 += fd * fd;
            an2 += a * a;
            checked += 1;
        }
        let scale = fd2.sqrt().max(an2.sqrt()).max(floor);
        out.push(GroupCheck {
            name,
            checked,
            relative_error: diff2.sqrt() / scale,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_bucket_known_values() {
        for (off, want) in [
            (0, 0),
            (-79, 79),
            (-80, 80),
            (80, 240),
            (-799, 159),
            (-800, 159),
            (5000, 319),
        ] {
            assert_eq!(exact_bucket(off, 320, 800), want, "offset {off}");
        }
        // ln(160/80)/ln(10) · 80 = 24.08…
        assert_eq!(exact_bucket(-160, 320, 800), 104);
    }
}
