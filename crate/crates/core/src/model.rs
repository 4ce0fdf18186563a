//! Network shape, parameters, encodings, and the two forward passes.
//!
//! The task is the byte map `SBox(x ^ key)`. Inputs enter as 8 bits
//! (LSB-first), the hidden layer is ReLU, and the output layer is affine with
//! the class decided by argmax. The float path additionally exposes softmax
//! probabilities for training; the integer path is the reference semantics
//! for everything downstream (fault campaigns, margins, the datapath
//! emulator).

use serde::{Deserialize, Serialize};

use crate::sbox::aes_sbox;

/// Layer sizes. The substitution-box task is always `8-m-256`; toy shapes are
/// allowed so that oracles stay hand-enumerable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    /// Input neurons (bits of the input byte). 8 for the real task.
    pub inputs: usize,
    /// Hidden neurons.
    pub hidden: usize,
    /// Output neurons (classes). 256 for the real task.
    pub outputs: usize,
}

impl Topology {
    pub fn new(inputs: usize, hidden: usize, outputs: usize) -> Self {
        assert!(inputs >= 1 && hidden >= 1 && outputs >= 1);
        Self { inputs, hidden, outputs }
    }

    /// The substitution-box shape: 8 input bits, `hidden` hidden neurons,
    /// 256 output classes.
    pub fn aes(hidden: usize) -> Self {
        Self::new(8, hidden, 256)
    }

    pub fn is_aes(&self) -> bool {
        self.inputs == 8 && self.outputs == 256
    }
}

/// One parameter group of the two-layer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    W1,
    #[serde(rename = "b1")]
    B1,
    W2,
    #[serde(rename = "b2")]
    B2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::W1, ParamGroup::B1, ParamGroup::W2, ParamGroup::B2];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::W1 => "W1",
            ParamGroup::B1 => "b1",
            ParamGroup::W2 => "W2",
            ParamGroup::B2 => "b2",
        }
    }
}

/// Real-valued trained parameters.
///
/// `w1` is `hidden x inputs` row-major (row = hidden neuron), `w2` is
/// `outputs x hidden` row-major (row = output neuron).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatParams {
    pub topology: Topology,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl FloatParams {
    pub fn zeros(topology: Topology) -> Self {
        Self {
            topology,
            w1: vec![0.0; topology.hidden * topology.inputs],
            b1: vec![0.0; topology.hidden],
            w2: vec![0.0; topology.outputs * topology.hidden],
            b2: vec![0.0; topology.outputs],
        }
    }

    #[inline]
    pub fn w1_at(&self, hidden: usize, input: usize) -> f64 {
        self.w1[hidden * self.topology.inputs + input]
    }

    #[inline]
    pub fn w2_at(&self, output: usize, hidden: usize) -> f64 {
        self.w2[output * self.topology.hidden + hidden]
    }

    pub fn all_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Two's-complement storage width, in bits, for each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupWidths {
    pub w1: u32,
    pub b1: u32,
    pub w2: u32,
    pub b2: u32,
}

impl GroupWidths {
    pub fn uniform(bits: u32) -> Self {
        Self { w1: bits, b1: bits, w2: bits, b2: bits }
    }

    pub fn get(&self, group: ParamGroup) -> u32 {
        match group {
            ParamGroup::W1 => self.w1,
            ParamGroup::B1 => self.b1,
            ParamGroup::W2 => self.w2,
            ParamGroup::B2 => self.b2,
        }
    }

    pub fn max_with(&self, other: GroupWidths) -> Self {
        Self {
            w1: self.w1.max(other.w1),
            b1: self.b1.max(other.b1),
            w2: self.w2.max(other.w2),
            b2: self.b2.max(other.b2),
        }
    }
}

/// Minimal signed two's-complement width that represents `v` (at least 1 bit).
pub fn min_signed_width(v: i64) -> u32 {
    for bits in 1..=63u32 {
        let lo = -(1i64 << (bits - 1));
        let hi = (1i64 << (bits - 1)) - 1;
        if v >= lo && v <= hi {
            return bits;
        }
    }
    64
}

/// Signed range `[lo, hi]` of a two's-complement width.
pub fn width_range(bits: u32) -> (i64, i64) {
    assert!((1..=63).contains(&bits));
    (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
}

/// Integer fixed-point parameters.
///
/// `w1`, `b1`, `w2` are stored at scale `2^precision`; `b2` at
/// `2^(2*precision)` so every term of an output logit shares one scale and
/// the integer argmax provably equals the float argmax on the dequantized
/// parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantParams {
    pub topology: Topology,
    /// Fractional bits.
    pub precision: u32,
    pub w1: Vec<i64>,
    pub b1: Vec<i64>,
    pub w2: Vec<i64>,
    pub b2: Vec<i64>,
    pub widths: GroupWidths,
}

impl QuantParams {
    #[inline]
    pub fn w1_at(&self, hidden: usize, input: usize) -> i64 {
        self.w1[hidden * self.topology.inputs + input]
    }

    #[inline]
    pub fn w2_at(&self, output: usize, hidden: usize) -> i64 {
        self.w2[output * self.topology.hidden + hidden]
    }

    pub fn group_values(&self, group: ParamGroup) -> &[i64] {
        match group {
            ParamGroup::W1 => &self.w1,
            ParamGroup::B1 => &self.b1,
            ParamGroup::W2 => &self.w2,
            ParamGroup::B2 => &self.b2,
        }
    }

    pub fn group_values_mut(&mut self, group: ParamGroup) -> &mut [i64] {
        match group {
            ParamGroup::W1 => &mut self.w1,
            ParamGroup::B1 => &mut self.b1,
            ParamGroup::W2 => &mut self.w2,
            ParamGroup::B2 => &mut self.b2,
        }
    }

    /// True when every stored value fits its group's width.
    pub fn fits_widths(&self) -> bool {
        ParamGroup::ALL.iter().all(|&g| {
            let (lo, hi) = width_range(self.widths.get(g));
            self.group_values(g).iter().all(|&v| v >= lo && v <= hi)
        })
    }

    /// Same parameters with each group width raised to at least `other`'s.
    pub fn widen_widths(&self, other: GroupWidths) -> QuantParams {
        let mut q = self.clone();
        q.widths = self.widths.max_with(other);
        q
    }
}

/// One training/classification example: an input byte and its class index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub input: u8,
    pub label: usize,
}

/// The 256 input/label pairs for a fixed key byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub key_byte: u8,
    /// `(x, SBox(x ^ key_byte))` for every byte `x` in order.
    pub pairs: Vec<(u8, u8)>,
}

impl Dataset {
    pub fn samples(&self) -> Vec<Sample> {
        self.pairs.iter().map(|&(x, y)| Sample { input: x, label: y as usize }).collect()
    }
}

/// Builds the dataset `(x, SBox(x ^ key))` over all 256 bytes.
pub fn aes_dataset(key_byte: u8) -> Dataset {
    let pairs = (0..=255u8).map(|x| (x, aes_sbox(x ^ key_byte))).collect();
    Dataset { key_byte, pairs }
}

/// Input byte as 8 bits, LSB-first: component `i` is bit `i` of `x`.
#[inline]
pub fn encode_input(x: u8) -> [u8; 8] {
    let mut bits = [0u8; 8];
    for (i, b) in bits.iter_mut().enumerate() {
        *b = (x >> i) & 1;
    }
    bits
}

/// One-hot label vector of length 256.
pub fn encode_label(y: u8) -> [f64; 256] {
    let mut v = [0.0; 256];
    v[y as usize] = 1.0;
    v
}

/// Index of the maximum plus a tie flag. Ties resolve to the lowest index;
/// the flag is set when the maximum is attained more than once.
pub fn argmax_decision<T: PartialOrd + Copy>(values: &[T]) -> (usize, bool) {
    assert!(!values.is_empty(), "argmax of empty vector");
    let mut best = 0usize;
    let mut tie = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tie = false;
        } else if v == values[best] {
            tie = true;
        }
    }
    (best, tie)
}

/// Float forward pass: ReLU hidden layer, affine output, stable softmax.
#[derive(Debug, Clone)]
pub struct FloatTrace {
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub decision: usize,
    pub tie: bool,
}

pub fn forward_float(params: &FloatParams, x: u8) -> FloatTrace {
    let t = params.topology;
    let bits = encode_input(x);
    let mut pre_hidden = vec![0.0f64; t.hidden];
    for j in 0..t.hidden {
        let mut acc = params.b1[j];
        let row = &params.w1[j * t.inputs..(j + 1) * t.inputs];
        for (i, &w) in row.iter().enumerate().take(8.min(t.inputs)) {
            if bits[i] != 0 {
                acc += w;
            }
        }
        pre_hidden[j] = acc;
    }
    let hidden: Vec<f64> = pre_hidden.iter().map(|&a| a.max(0.0)).collect();
    let mut logits = vec![0.0f64; t.outputs];
    for (k, logit) in logits.iter_mut().enumerate() {
        let row = &params.w2[k * t.hidden..(k + 1) * t.hidden];
        let mut acc = params.b2[k];
        for (h, w) in hidden.iter().zip(row) {
            acc += h * w;
        }
        *logit = acc;
    }
    // Softmax with max subtraction so large logits cannot overflow the
    // exponential.
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    let (decision, tie) = argmax_decision(&logits);
    FloatTrace { pre_hidden, hidden, logits, probabilities, decision, tie }
}

/// Integer forward pass: exact arithmetic, no rounding anywhere.
///
/// Accumulators are `i64`; with group widths up to 24 bits and the task's
/// layer sizes that cannot overflow, and overflow in the unexpected case
/// panics rather than wrapping (width-limited behavior lives only in the
/// datapath emulator).
#[derive(Debug, Clone)]
pub struct IntTrace {
    pub pre_hidden: Vec<i64>,
    pub hidden: Vec<i64>,
    pub logits: Vec<i64>,
    pub decision: usize,
    pub tie: bool,
}

pub fn forward_int(params: &QuantParams, x: u8) -> IntTrace {
    let t = params.topology;
    let bits = encode_input(x);
    let mut pre_hidden = vec![0i64; t.hidden];
    for j in 0..t.hidden {
        let mut acc = params.b1[j];
        let row = &params.w1[j * t.inputs..(j + 1) * t.inputs];
        for (i, &w) in row.iter().enumerate().take(8.min(t.inputs)) {
            if bits[i] != 0 {
                acc += w;
            }
        }
        pre_hidden[j] = acc;
    }
    let hidden: Vec<i64> = pre_hidden.iter().map(|&a| a.max(0)).collect();
    let mut logits = vec![0i64; t.outputs];
    for (k, logit) in logits.iter_mut().enumerate() {
        let row = &params.w2[k * t.hidden..(k + 1) * t.hidden];
        let mut acc = params.b2[k];
        for (h, w) in hidden.iter().zip(row) {
            acc += h * w;
        }
        *logit = acc;
    }
    let (decision, tie) = argmax_decision(&logits);
    IntTrace { pre_hidden, hidden, logits, decision, tie }
}

/// Fraction of samples classified correctly by the float network. A tie on
/// the maximum counts as incorrect even when the lowest tied index is the
/// label (strict-margin rule).
pub fn accuracy_float(params: &FloatParams, samples: &[Sample]) -> f64 {
    let correct = samples
        .iter()
        .filter(|s| {
            let tr = forward_float(params, s.input);
            tr.decision == s.label && !tr.tie
        })
        .count();
    correct as f64 / samples.len() as f64
}

/// Integer-path accuracy under the same strict-margin rule.
pub fn accuracy_int(params: &QuantParams, samples: &[Sample]) -> f64 {
    let correct = samples
        .iter()
        .filter(|s| {
            let tr = forward_int(params, s.input);
            tr.decision == s.label && !tr.tie
        })
        .count();
    correct as f64 / samples.len() as f64
}
