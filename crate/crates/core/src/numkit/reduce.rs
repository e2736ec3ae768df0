use crate::error::{domain, Error, Result};
use crate::numkit::rng::RngStream;
use crate::numkit::tol;

/// `log Σ exp(v_i)`, shifted by the maximum.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return domain("log_sum_exp of an empty vector");
    }
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return domain("log_sum_exp of a non-finite vector");
    }
    Ok(lse_unchecked(v))
}

/// Same as [`log_sum_exp`] but tolerates `-inf` entries and skips validation.
/// Returns `-inf` when every entry is `-inf`.
pub(crate) fn lse_unchecked(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// `log (1/n Σ exp(v_i))`.
pub fn log_mean_exp(v: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(v)? - (v.len() as f64).ln())
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return domain("softmax of a non-finite vector");
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    Ok(softmax_unchecked(v))
}

/// Softmax that accepts `-inf` logits (zero probability).
pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

/// Draws an index with probability `probs[i]`. Exactly one uniform variate
/// is consumed per call. Mass deviating from one by more than
/// [`tol::PROB_SUM`] is rejected; smaller deviations are renormalized.
pub fn sample_categorical(probs: &[f64], rng: &mut RngStream) -> Result<usize> {
    if probs.is_empty() {
        return domain("categorical over an empty support");
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return domain("categorical with negative or non-finite mass");
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > tol::PROB_SUM {
        return Err(Error::Domain(format!(
            "categorical mass sums to {total}, not 1"
        )));
    }
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last_positive)
}
