use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bucketing of signed query–key offsets into `n` relative-position slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketConfig {
    /// Number of buckets; half for non-positive offsets, half for positive.
    pub n: usize,
    /// Offset magnitude from which every offset shares the last bucket.
    pub m: usize,
}

impl Default for BucketConfig {
    fn default() -> Self {
        BucketConfig { n: 320, m: 800 }
    }
}

impl BucketConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !self.n.is_multiple_of(4) || self.m <= self.n / 4 {
            return Err(Error::Config(format!(
                "bucket config needs n divisible by 4 and m > n/4, got n={} m={}",
                self.n, self.m
            )));
        }
        Ok(())
    }

    /// Bucket of offset `i − j`: exact below `n/4`, logarithmic up to `m`,
    /// saturated beyond; positive offsets use the upper half.
    pub fn index(&self, offset: i64) -> usize {
        let quarter = self.n / 4;
        let half = self.n / 2;
        let dist = offset.unsigned_abs() as usize;
        let base = if dist < quarter {
            dist
        } else if dist < self.m {
            let q = quarter as f64;
            let ratio = ((dist as f64).ln() - q.ln()) / ((self.m as f64).ln() - q.ln());
            ((q * (ratio + 1.0)).floor() as usize).min(half - 1)
        } else {
            half - 1
        };
        if offset > 0 {
            base + half
        } else {
            base
        }
    }

    /// `[len × len]` bucket indices for query `i` (rows) and key `j` (columns).
    pub fn matrix(&self, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                out.push(self.index(i as i64 - j as i64));
            }
        }
        out
    }
}

/// Free-function form of [`BucketConfig::index`].
pub fn bucket_index(offset: i64, cfg: &BucketConfig) -> usize {
    cfg.index(offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_values() {
        let c = BucketConfig::default();
        assert_eq!(c.index(0), 0);
        assert_eq!(c.index(-50), 50);
        assert_eq!(c.index(50), 210);
        assert_eq!(c.index(-1000), 159);
        assert_eq!(c.index(1000), 319);
        assert_eq!(c.index(-160), 104);
        assert_eq!(c.index(160), 264);
        assert_eq!(c.index(-799), 159);
        assert_eq!(c.index(-800), 159);
        assert_eq!(c.index(-80), 80);
        assert_eq!(c.index(-79), 79);
    }

    #[test]
    fn monotone_and_in_range() {
        let c = BucketConfig::default();
        let mut prev_neg = 0;
        let mut prev_pos = c.index(1);
        for d in 0..3000i64 {
            let neg = c.index(-d);
            assert!(neg < c.n / 2);
            assert!(neg >= prev_neg);
            prev_neg = neg;
            if d > 0 {
                let pos = c.index(d);
                assert!((c.n / 2..c.n).contains(&pos));
                assert!(pos >= prev_pos);
                prev_pos = pos;
            }
        }
    }

    #[test]
    fn validation() {
        assert!(BucketConfig { n: 30, m: 800 }.validate().is_err());
        assert!(BucketConfig { n: 320, m: 80 }.validate().is_err());
        assert!(BucketConfig::default().validate().is_ok());
    }
}
