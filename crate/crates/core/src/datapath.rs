//! Functional and cycle-count emulation of an iterative hardware datapath.
//!
//! The modeled architecture computes the hidden layer without multipliers:
//! one hidden neuron per iteration, its eight weights AND-gated by the input
//! bits, summed by two 4-input adders whose partial results feed a final
//! narrow adder together with the bias, then ReLU. The output layer computes
//! one neuron per iteration with a bank of 8 parallel signed multipliers
//! accumulating into a wide register over `ceil(m/8)` executions, bias
//! preloaded. A streaming ArgMax block keeps the index of the running
//! maximum (first maximum wins) in the `LM` register.
//!
//! Every intermediate is checked against its stage's register width; an
//! overflow is a hard error naming the stage, iteration, and value, because
//! the plain integer forward pass defines correctness. A wraparound mode
//! (off by default) instead truncates to the stage width in two's
//! complement, for studying what faulty silicon would actually do.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fault::FaultSite;
use crate::model::{encode_input, width_range, QuantParams, Topology};

#[derive(Debug, Error)]
pub enum DatapathError {
    #[error("invalid datapath config: {0}")]
    InvalidConfig(String),
    #[error("datapath expects 8 input bits, topology has {0}")]
    UnsupportedTopology(usize),
    #[error("{stage} overflow at {location}: value {value} needs more than {bits} bits")]
    Overflow { stage: &'static str, location: String, value: i64, bits: u32 },
}

/// Register widths and per-stage latencies of the datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatapathConfig {
    /// Width of the hidden-layer adder stage (partial sums, bias, and the
    /// stored pre-activation).
    pub hidden_adder_bits: u32,
    /// Signed operand width of the output-layer multipliers.
    pub multiplier_bits: u32,
    /// Output accumulator width.
    pub accumulator_bits: u32,
    /// Parallel multipliers in the output stage.
    pub multiplier_count: usize,
    /// Cycles per hidden iteration.
    pub hidden_cycles: u64,
    /// Cycles per output-layer execution.
    pub output_cycles: u64,
    /// Fixed control overhead in cycles.
    pub base_cycles: u64,
    /// Truncate to stage widths instead of erroring.
    pub wraparound: bool,
}

impl Default for DatapathConfig {
    fn default() -> Self {
        Self {
            hidden_adder_bits: 9,
            multiplier_bits: 20,
            accumulator_bits: 48,
            multiplier_count: 8,
            hidden_cycles: 24,
            output_cycles: 23,
            base_cycles: 0,
            wraparound: false,
        }
    }
}

impl DatapathConfig {
    fn validate(&self) -> Result<(), DatapathError> {
        let bad = |msg: String| Err(DatapathError::InvalidConfig(msg));
        if self.hidden_adder_bits == 0 || self.hidden_adder_bits > 62 {
            return bad(format!("hidden_adder_bits {} out of (0, 62]", self.hidden_adder_bits));
        }
        if self.multiplier_bits == 0 || self.multiplier_bits > 30 {
            return bad(format!("multiplier_bits {} out of (0, 30]", self.multiplier_bits));
        }
        if self.accumulator_bits == 0 || self.accumulator_bits > 62 {
            return bad(format!("accumulator_bits {} out of (0, 62]", self.accumulator_bits));
        }
        if self.multiplier_count == 0 {
            return bad("multiplier_count must be >= 1".into());
        }
        if self.hidden_cycles == 0 || self.output_cycles == 0 {
            return bad("per-stage latencies must be >= 1 cycle".into());
        }
        Ok(())
    }
}

/// Everything the datapath produced on one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationTrace {
    /// ReLU output of each hidden iteration.
    pub hidden: Vec<i64>,
    /// Logit of each output iteration.
    pub logits: Vec<i64>,
    /// `LM` register value after each output iteration.
    pub lm_history: Vec<usize>,
    pub decision: usize,
    /// A later neuron matched the running maximum exactly (the register
    /// keeps the earlier index).
    pub tie: bool,
    pub hidden_iterations: usize,
    pub output_iterations: usize,
    pub executions_per_output: usize,
    pub total_cycles: u64,
}

/// Value checked (or wrapped) against a stage register of `bits` width.
fn stage_value(
    cfg: &DatapathConfig,
    stage: &'static str,
    location: impl Fn() -> String,
    bits: u32,
    value: i64,
) -> Result<i64, DatapathError> {
    let (lo, hi) = width_range(bits);
    if value >= lo && value <= hi {
        Ok(value)
    } else if cfg.wraparound {
        let width = 64 - bits;
        Ok((value << width) >> width)
    } else {
        Err(DatapathError::Overflow { stage, location: location(), value, bits })
    }
}

/// Runs the datapath on one input byte.
pub fn emulate(
    q: &QuantParams,
    x: u8,
    cfg: &DatapathConfig,
) -> Result<EmulationTrace, DatapathError> {
    cfg.validate()?;
    let t = q.topology;
    if t.inputs != 8 {
        return Err(DatapathError::UnsupportedTopology(t.inputs));
    }
    let bits = encode_input(x);
    let executions_per_output = t.hidden.div_ceil(cfg.multiplier_count);

    // Hidden layer: one neuron per iteration, no multipliers.
    let mut hidden = Vec::with_capacity(t.hidden);
    for j in 0..t.hidden {
        let row = &q.w1[j * 8..(j + 1) * 8];
        let gated: Vec<i64> =
            row.iter().zip(&bits).map(|(&w, &b)| if b != 0 { w } else { 0 }).collect();
        let loc = || format!("hidden iteration {j}");
        let ps_a = stage_value(cfg, "hidden partial adder A", loc, cfg.hidden_adder_bits, gated[..4].iter().sum())?;
        let ps_b = stage_value(cfg, "hidden partial adder B", loc, cfg.hidden_adder_bits, gated[4..].iter().sum())?;
        let bias = stage_value(cfg, "hidden bias input", loc, cfg.hidden_adder_bits, q.b1[j])?;
        let pre = stage_value(cfg, "hidden final adder", loc, cfg.hidden_adder_bits, ps_a + ps_b + bias)?;
        hidden.push(pre.max(0));
    }

    // Output layer: 8 multipliers wide, bias preloaded in the accumulator,
    // streaming ArgMax after each neuron.
    let mut logits = Vec::with_capacity(t.outputs);
    let mut lm_history = Vec::with_capacity(t.outputs);
    let mut lm = 0usize;
    let mut running_max = 0i64;
    let mut tie = false;
    for k in 0..t.outputs {
        let row = &q.w2[k * t.hidden..(k + 1) * t.hidden];
        let mut acc = stage_value(
            cfg,
            "output accumulator (bias preload)",
            || format!("output neuron {k}"),
            cfg.accumulator_bits,
            q.b2[k],
        )?;
        for e in 0..executions_per_output {
            let mut lane_sum = 0i64;
            for lane in 0..cfg.multiplier_count {
                let j = e * cfg.multiplier_count + lane;
                if j >= t.hidden {
                    break;
                }
                let loc = || format!("output neuron {k}, execution {e}, lane {lane}");
                let h = stage_value(cfg, "multiplier operand (hidden)", loc, cfg.multiplier_bits, hidden[j])?;
                let w = stage_value(cfg, "multiplier operand (weight)", loc, cfg.multiplier_bits, row[j])?;
                lane_sum += h * w;
            }
            acc = stage_value(
                cfg,
                "output accumulator",
                || format!("output neuron {k}, execution {e}"),
                cfg.accumulator_bits,
                acc + lane_sum,
            )?;
        }
        logits.push(acc);
        if k == 0 {
            lm = 0;
            running_max = acc;
            tie = false;
        } else if acc > running_max {
            lm = k;
            running_max = acc;
            tie = false;
        } else if acc == running_max {
            tie = true;
        }
        lm_history.push(lm);
    }

    Ok(EmulationTrace {
        decision: lm,
        tie,
        hidden_iterations: t.hidden,
        output_iterations: t.outputs,
        executions_per_output,
        total_cycles: cycle_count(t, cfg),
        hidden,
        logits,
        lm_history,
    })
}

/// Latency of one inference:
/// `base + m*hidden_cycles + n*ceil(m/multipliers)*output_cycles`.
pub fn cycle_count(t: Topology, cfg: &DatapathConfig) -> u64 {
    let executions = t.hidden.div_ceil(cfg.multiplier_count) as u64;
    cfg.base_cycles
        + t.hidden as u64 * cfg.hidden_cycles
        + t.outputs as u64 * executions * cfg.output_cycles
}

/// Emulates with one stored parameter replaced by `v`.
pub fn inject_and_emulate(
    q: &QuantParams,
    site: FaultSite,
    v: i64,
    x: u8,
    cfg: &DatapathConfig,
) -> Result<EmulationTrace, DatapathError> {
    let mut injected = q.clone();
    injected.group_values_mut(site.group)[site.storage_index(q.topology)] = v;
    emulate(&injected, x, cfg)
}

/// Published latencies being calibrated against: `(hidden_size, cycles)` for
/// the 8-m-256 family.
pub const CYCLE_CALIBRATION_ROWS: [(usize, u64); 4] =
    [(8, 1350), (32, 25_576), (64, 49_352), (128, 96_910)];

/// Best-fit per-stage latencies for the cycle formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub hidden_cycles: u64,
    pub output_cycles: u64,
    pub base_cycles: u64,
    /// Formula minus target, row by row.
    pub residuals: Vec<i64>,
    pub sum_squared_error: u128,
    /// True only when every residual is zero.
    pub exact: bool,
}

/// Integer least-squares fit of `(base, hidden_cycles, output_cycles)` to
/// observed latencies, with `multiplier_count` lanes and `n_outputs` output
/// neurons. Ties in the error break toward the smallest `hidden_cycles`,
/// then `output_cycles`, then `base`.
///
/// The published rows are collinear (`m` and `n*ceil(m/8)` are proportional
/// for these shapes), so only `hidden_cycles + 32*output_cycles` is
/// identifiable from them and no non-negative intercept fits exactly; the
/// residuals say how far off the formula is.
pub fn calibrate_latencies(
    rows: &[(usize, u64)],
    n_outputs: usize,
    multiplier_count: usize,
) -> Calibration {
    assert!(!rows.is_empty() && multiplier_count > 0);
    let features: Vec<(u64, u64, u64)> = rows
        .iter()
        .map(|&(m, y)| (m as u64, (n_outputs as u64) * (m.div_ceil(multiplier_count) as u64), y))
        .collect();
    let mut best: Option<(u128, u64, u64, u64)> = None;
    for ch in 1..=800u64 {
        for co in 1..=100u64 {
            // Optimal real-valued intercept is the mean residual; probe its
            // clamped floor and ceiling.
            let sum_short: i128 = features
                .iter()
                .map(|&(fm, fo, y)| y as i128 - (fm * ch + fo * co) as i128)
                .sum();
            let mean = sum_short as f64 / rows.len() as f64;
            for c0 in [mean.floor().max(0.0) as u64, mean.ceil().max(0.0) as u64] {
                let sse: u128 = features
                    .iter()
                    .map(|&(fm, fo, y)| {
                        let r = (c0 + fm * ch + fo * co) as i128 - y as i128;
                        (r * r) as u128
                    })
                    .sum();
                let candidate = (sse, ch, co, c0);
                if best.is_none_or(|b| candidate < b) {
                    best = Some(candidate);
                }
            }
        }
    }
    let (sse, ch, co, c0) = best.expect("non-empty search space");
    let residuals: Vec<i64> = features
        .iter()
        .map(|&(fm, fo, y)| (c0 + fm * ch + fo * co) as i64 - y as i64)
        .collect();
    Calibration {
        hidden_cycles: ch,
        output_cycles: co,
        base_cycles: c0,
        exact: residuals.iter().all(|&r| r == 0),
        residuals,
        sum_squared_error: sse,
    }
}
