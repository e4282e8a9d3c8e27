//! Small statistics helpers shared by calibration, features and metrics.

use crate::error::{Error, Result};

/// Exact `q`-quantile with linear interpolation between order statistics.
///
/// With `n` values sorted ascending as `v`, the position is `h = (n - 1) q`
/// and the result is `v[floor(h)] + frac(h) * (v[floor(h) + 1] - v[floor(h)])`.
/// Uses selection rather than a full sort; the result is identical.
pub fn quantile_linear(values: &mut [f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("quantile {q} outside [0, 1]")));
    }
    let n = values.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    if lo + 1 >= n {
        return Ok(lo_val);
    }
    let hi_val = upper.iter().copied().min_by(f64::total_cmp).unwrap_or(lo_val);
    Ok(lo_val + frac * (hi_val - lo_val))
}

/// Mean and the half-width of a normal-approximation 95% confidence interval.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}
