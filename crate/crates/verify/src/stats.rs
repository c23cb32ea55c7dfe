//! Goodness-of-fit tests for the uniformity checks.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson chi-square p-value of `counts` against equal cell probabilities.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return 1.0;
    }
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

/// Asymptotic Kolmogorov–Smirnov p-value of samples against U(0, 1), with
/// the Stephens small-sample correction.
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 1.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / nf - x).max(x - i as f64 / nf))
        .fold(0.0, f64::max);
    let root = nf.sqrt();
    let lambda = (root + 0.12 + 0.11 / root) * d;
    kolmogorov_tail(lambda)
}

/// `P(K > λ) = 2 Σ_{k≥1} (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_samples_pass_and_skewed_fail() {
        let even: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&even) > 0.99);
        let skewed: Vec<f64> = even.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skewed) < 1e-6);
        assert!(chi_square_uniform(&[100, 100, 100]) > 0.99);
        assert!(chi_square_uniform(&[150, 100, 50]) < 1e-6);
    }

    #[test]
    fn kolmogorov_reference_point() {
        // Standard table: P(K > 1.36) ≈ 0.0494.
        assert!((kolmogorov_tail(1.36) - 0.0494).abs() < 5e-4);
    }
}
