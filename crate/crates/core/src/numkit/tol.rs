//! Tolerance constants shared across the crate.

/// Allowed deviation of a probability vector's sum from one before
/// `sample_categorical` refuses it.
pub const PROB_SUM: f64 = 1e-9;

/// Normalization slack asserted on softmax outputs and importance weights.
pub const NORMALIZATION: f64 = 1e-12;

/// Soft-Bellman residual tolerance for exact oracle tables.
pub const BELLMAN: f64 = 1e-10;

/// Relative error allowed between analytic and central-difference gradients.
pub const GRAD_REL: f64 = 1e-4;

/// Step used by central finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Default cap on enumerated discrete states, (K+1)^L.
pub const ENUMERATION_CAP: usize = 20_000;

/// Relative slack used when comparing exact bound expectations.
pub const BOUND_EXACT: f64 = 1e-9;

/// Relative error used to compare two gradient vectors: max abs difference
/// scaled by the larger norm, floored at 1.
pub fn grad_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0_f64, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|x| x.abs())
        .fold(1.0_f64, f64::max);
    diff / scale
}
