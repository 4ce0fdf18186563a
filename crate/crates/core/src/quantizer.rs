//! Fixed-point conversion of trained parameters.
//!
//! All parameters are scaled by `2^p` and rounded half-away-from-zero —
//! except the output biases, which are scaled by `2^(2p)`. An output logit
//! is a sum of products of two `2^p`-scaled factors plus its bias, so with
//! `b2` at `2^(2p)` every term shares one scale: the integer logits are
//! exactly `2^(2p)` times the real logits of the dequantized network, and
//! the integer argmax provably equals the float argmax.

use crate::model::{
    accuracy_int, argmax_decision, forward_int, min_signed_width, FloatParams, GroupWidths,
    QuantParams, Sample,
};

/// Half-away-from-zero rounding of `v * 2^shift` to an integer.
/// (`f64::round` rounds halves away from zero; the power-of-two product is
/// exact, so the tie cases are decided on the true value.)
#[inline]
fn round_scaled(v: f64, shift: u32) -> i64 {
    let scaled = v * 2f64.powi(shift as i32);
    debug_assert!(scaled.is_finite() && scaled.abs() < 9.0e18);
    scaled.round() as i64
}

/// Quantizes at `precision` fractional bits: `W1`, `b1`, `W2` at scale
/// `2^p`, `b2` at `2^(2p)`. Group widths are set to the minimal
/// two's-complement width holding each group; widen afterwards with
/// [`QuantParams::widen_widths`] if a larger storage width is wanted.
pub fn quantize(params: &FloatParams, precision: u32) -> QuantParams {
    assert!(params.all_finite(), "cannot quantize non-finite parameters");
    assert!(precision <= 20, "precision {precision} is beyond any sensible fixed-point range");
    let scale_once = |v: &f64| round_scaled(*v, precision);
    let scale_twice = |v: &f64| round_scaled(*v, 2 * precision);
    let w1: Vec<i64> = params.w1.iter().map(scale_once).collect();
    let b1: Vec<i64> = params.b1.iter().map(scale_once).collect();
    let w2: Vec<i64> = params.w2.iter().map(scale_once).collect();
    let b2: Vec<i64> = params.b2.iter().map(scale_twice).collect();
    let min_width = |vals: &[i64]| vals.iter().copied().map(min_signed_width).max().unwrap_or(1);
    let widths = GroupWidths {
        w1: min_width(&w1),
        b1: min_width(&b1),
        w2: min_width(&w2),
        b2: min_width(&b2),
    };
    QuantParams { topology: params.topology, precision, w1, b1, w2, b2, widths }
}

/// Exact inverse scaling. Integer values divided by a power of two are exact
/// in `f64`, so `quantize(dequantize(q), q.precision)` returns `q` bit for
/// bit.
pub fn dequantize(q: &QuantParams) -> FloatParams {
    let s1 = 2f64.powi(q.precision as i32);
    let s2 = 2f64.powi(2 * q.precision as i32);
    FloatParams {
        topology: q.topology,
        w1: q.w1.iter().map(|&v| v as f64 / s1).collect(),
        b1: q.b1.iter().map(|&v| v as f64 / s1).collect(),
        w2: q.w2.iter().map(|&v| v as f64 / s1).collect(),
        b2: q.b2.iter().map(|&v| v as f64 / s2).collect(),
    }
}

/// Outcome of checking a quantized model against its dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantReport {
    /// Fraction classified correctly (ties count as incorrect).
    pub accuracy: f64,
    /// Minimum over inputs of `y_label - max(other logits)`, in integer
    /// logit units (`2^(2p)` per real unit). Positive iff every input is
    /// classified correctly with no tie.
    pub min_margin: i64,
    /// Inputs whose maximum logit is attained more than once.
    pub tie_count: usize,
}

/// Evaluates accuracy, worst decision margin, and tie count on the integer
/// path.
pub fn verify_quantized(q: &QuantParams, samples: &[Sample]) -> QuantReport {
    assert!(!samples.is_empty());
    let mut min_margin = i64::MAX;
    let mut tie_count = 0usize;
    for s in samples {
        let tr = forward_int(q, s.input);
        let best_other = tr
            .logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != s.label)
            .map(|(_, &y)| y)
            .max()
            .expect("at least two outputs");
        min_margin = min_margin.min(tr.logits[s.label] - best_other);
        let (_, tie) = argmax_decision(&tr.logits);
        if tie {
            tie_count += 1;
        }
    }
    QuantReport { accuracy: accuracy_int(q, samples), min_margin, tie_count }
}
