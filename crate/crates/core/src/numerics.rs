//! Log-domain helpers.

/// `log(sum(exp(v)))` with max-subtraction. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalizes log-weights in place so that `exp` of them sums to one and
/// returns the log normalizer. Leaves the slice untouched when the normalizer
/// is not finite.
pub fn normalize_log_weights(log_w: &mut [f64]) -> f64 {
    let lse = log_sum_exp(log_w);
    if lse.is_finite() {
        for w in log_w.iter_mut() {
            *w -= lse;
        }
    }
    lse
}

/// Converts log-probabilities to a probability vector by max-subtraction.
/// Returns `None` when every entry is `-inf` (or any is NaN).
pub fn softmax(log_p: &[f64]) -> Option<Vec<f64>> {
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || log_p.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut out: Vec<f64> = log_p.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= total;
    }
    Some(out)
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;
