//! Magnitude quantiles of large fields.
//!
//! Quantiles are type-7 (linear interpolation between order statistics,
//! `h = (n - 1) q`). Fields longer than the subsample cap are estimated from
//! a uniform subsample drawn without replacement: a seeded partial
//! Fisher-Yates shuffle of the index range, keeping the first `cap` indices.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_SUBSAMPLE_CAP: usize = 10_000_000;

/// Type-7 quantile of `|values|`, subsampled above `subsample_cap`.
pub fn field_quantile<T>(values: &[T], q: f64, subsample_cap: usize, seed: u64) -> Result<f64>
where
    T: Copy + Into<f64>,
{
    check_args(values.len(), q)?;
    if subsample_cap == 0 {
        return Err(Error::InvalidArgument("subsample cap must be positive".into()));
    }
    let mut magnitudes: Vec<f64> = if values.len() <= subsample_cap {
        values.iter().map(|&v| v.into().abs()).collect()
    } else {
        subsample_indices(values.len(), subsample_cap, seed)
            .into_iter()
            .map(|i| values[i as usize].into().abs())
            .collect()
    };
    Ok(select_type7(&mut magnitudes, q))
}

fn check_args(len: usize, q: f64) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidArgument("quantile of empty input".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile fraction {q} outside (0, 1)")));
    }
    Ok(())
}

/// First `cap` entries of a seeded partial shuffle of `0..n`.
fn subsample_indices(n: usize, cap: usize, seed: u64) -> Vec<u32> {
    assert!(n <= u32::MAX as usize + 1, "field too large for 32-bit indices");
    let mut idx: Vec<u32> = (0..n as u64).map(|i| i as u32).collect();
    let mut rng = rng::stream(seed);
    for i in 0..cap {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(cap);
    idx
}

/// Type-7 quantile by selection; reorders `xs`.
pub(crate) fn select_type7(xs: &mut [f64], q: f64) -> f64 {
    let n = xs.len();
    let h = (n - 1) as f64 * q;
    let lo = (h.floor() as usize).min(n - 1);
    let frac = h - lo as f64;
    let (_, &mut a, right) = xs.select_nth_unstable_by(lo, cmp);
    if frac == 0.0 || right.is_empty() {
        return a;
    }
    let b = right.iter().copied().min_by(cmp).unwrap();
    a + frac * (b - a)
}

fn cmp(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}
