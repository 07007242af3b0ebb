//! Small numeric kernels shared across the crate: stabilized softmax,
//! deterministic reductions, and a golden-section line search.
//!
//! All probabilities live in natural log space (nats) whenever a log is taken.

/// Log-sum-exp of a slice, stabilized by subtracting the maximum.
///
/// Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Writes `log softmax(logits)` into `out`.
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let lse = log_sum_exp(logits);
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// Writes `softmax(logits)` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    log_softmax_into(logits, out);
    for o in out.iter_mut() {
        *o = o.exp();
    }
}

/// Pairwise (binary-tree) summation over a fixed element order.
///
/// The reduction tree depends only on `values.len()`, so the result is
/// bit-identical no matter how the terms were produced, and rounding error
/// grows like O(log n) instead of O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Euclidean norm.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest absolute entry.
pub fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Draws an index from a probability vector using one uniform variate in [0, 1).
///
/// Falls back to the last index if cumulative rounding leaves `u` unconsumed.
pub fn categorical_draw(probs: &[f64], u: f64) -> usize {
    debug_assert!(!probs.is_empty());
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Golden-section search for the minimizer of a unimodal `f` on `[lo, hi]`.
///
/// Runs until the bracket width drops below `width_tol` (or 200 iterations).
pub fn golden_section_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, width_tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if b - a <= width_tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
