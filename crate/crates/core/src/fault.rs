//! Exhaustive single-location fault injection.
//!
//! A campaign corrupts one stored parameter at a time, tries every wrong
//! encoding that parameter could hold, runs all inputs, and counts the
//! (value, input) pairs whose decision goes wrong. Ties count as faulty — a
//! real circuit's behavior on a tied maximum is undefined.
//!
//! The execution path is incremental: fault-free traces are cached per
//! input, and each injected value only patches what lies downstream of the
//! fault (one logit for `W2`/`b2`, one hidden unit and a rank-one logit
//! update for `W1`/`b1`). A deterministic sample of tuples is re-run through
//! the plain full forward pass every campaign as an oracle against the
//! incremental path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    accuracy_int, encode_input, forward_int, width_range, GroupWidths, ParamGroup, QuantParams,
    Sample, Topology,
};

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("fault value {value} outside the {group} space [{lo}, {hi}]")]
    ValueOutOfSpace { group: &'static str, value: i64, lo: i64, hi: i64 },
    #[error("{group} site ({i}, {j}) out of bounds for topology {inputs}-{hidden}-{outputs}")]
    SiteOutOfBounds { group: &'static str, i: usize, j: usize, inputs: usize, hidden: usize, outputs: usize },
    #[error("model value {group}[{index}] = {value} is not representable in the fault space [{lo}, {hi}]; widen the space or re-quantize")]
    ModelOutsideSpace { group: &'static str, index: usize, value: i64, lo: i64, hi: i64 },
    #[error("campaign precondition: fault-free accuracy must be 1.0, got {0}")]
    ImperfectModel(f64),
    #[error("invalid campaign option: {0}")]
    InvalidOptions(String),
}

/// One parameter location. `i` is the source index (input bit for `W1`,
/// hidden unit for `W2`, the neuron itself for biases); `j` is the
/// destination index (hidden unit for `W1`, output for `W2`, unused and 0
/// for biases).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSite {
    pub group: ParamGroup,
    pub i: usize,
    pub j: usize,
}

impl FaultSite {
    pub(crate) fn check(&self, t: Topology) -> Result<(), FaultError> {
        let ok = match self.group {
            ParamGroup::W1 => self.i < t.inputs && self.j < t.hidden,
            ParamGroup::B1 => self.i < t.hidden && self.j == 0,
            ParamGroup::W2 => self.i < t.hidden && self.j < t.outputs,
            ParamGroup::B2 => self.i < t.outputs && self.j == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(FaultError::SiteOutOfBounds {
                group: self.group.name(),
                i: self.i,
                j: self.j,
                inputs: t.inputs,
                hidden: t.hidden,
                outputs: t.outputs,
            })
        }
    }

    /// Index of this site's parameter in its group's storage vector.
    pub(crate) fn storage_index(&self, t: Topology) -> usize {
        match self.group {
            ParamGroup::W1 => self.j * t.inputs + self.i,
            ParamGroup::B1 => self.i,
            ParamGroup::W2 => self.j * t.hidden + self.i,
            ParamGroup::B2 => self.i,
        }
    }
}

/// Inclusive integer interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: i64,
    pub max: i64,
}

impl ValueRange {
    pub fn contains(&self, v: i64) -> bool {
        v >= self.min && v <= self.max
    }

    /// Number of values excluding one (the correct encoding).
    pub fn corrupted_count(&self) -> u64 {
        (self.max - self.min) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRanges {
    pub w1: ValueRange,
    pub b1: ValueRange,
    pub w2: ValueRange,
    pub b2: ValueRange,
}

/// What a corrupted parameter may hold.
///
/// `FullWidth` enumerates every two's-complement encoding of each group's
/// width — the hardware view, where a stuck or flipped register bit can
/// produce any pattern. `ObservedRange` restricts to an explicit per-group
/// interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultSpace {
    FullWidth(GroupWidths),
    ObservedRange(GroupRanges),
}

impl FaultSpace {
    /// All four groups stored in 8-bit registers.
    pub fn full8() -> Self {
        FaultSpace::FullWidth(GroupWidths::uniform(8))
    }

    /// Each group at the model's own (minimal) storage width.
    pub fn min_widths(q: &QuantParams) -> Self {
        FaultSpace::FullWidth(q.widths)
    }

    /// Per-group `[min, max]` over the values the model actually uses.
    pub fn observed(q: &QuantParams) -> Self {
        let span = |vals: &[i64]| ValueRange {
            min: vals.iter().copied().min().expect("non-empty group"),
            max: vals.iter().copied().max().expect("non-empty group"),
        };
        FaultSpace::ObservedRange(GroupRanges {
            w1: span(&q.w1),
            b1: span(&q.b1),
            w2: span(&q.w2),
            b2: span(&q.b2),
        })
    }

    pub fn range(&self, group: ParamGroup) -> ValueRange {
        match self {
            FaultSpace::FullWidth(w) => {
                let (min, max) = width_range(w.get(group));
                ValueRange { min, max }
            }
            FaultSpace::ObservedRange(r) => match group {
                ParamGroup::W1 => r.w1,
                ParamGroup::B1 => r.b1,
                ParamGroup::W2 => r.w2,
                ParamGroup::B2 => r.b2,
            },
        }
    }

    /// Corrupted values per site of `group` (all values in range except the
    /// correct one).
    pub fn corrupted_per_site(&self, group: ParamGroup) -> u64 {
        self.range(group).corrupted_count()
    }

    /// Every stored parameter must itself be representable in the space,
    /// otherwise "all values except the correct one" is ill-defined.
    pub fn validate_model(&self, q: &QuantParams) -> Result<(), FaultError> {
        for group in ParamGroup::ALL {
            let r = self.range(group);
            for (index, &value) in q.group_values(group).iter().enumerate() {
                if !r.contains(value) {
                    return Err(FaultError::ModelOutsideSpace {
                        group: group.name(),
                        index,
                        value,
                        lo: r.min,
                        hi: r.max,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Sites in the fixed campaign order: `W1` row-major (input-major), `b1`,
/// `W2` row-major (hidden-major), `b2`.
pub fn enumerate_sites(t: Topology) -> Vec<FaultSite> {
    let mut sites =
        Vec::with_capacity(t.inputs * t.hidden + t.hidden + t.hidden * t.outputs + t.outputs);
    for i in 0..t.inputs {
        for j in 0..t.hidden {
            sites.push(FaultSite { group: ParamGroup::W1, i, j });
        }
    }
    for i in 0..t.hidden {
        sites.push(FaultSite { group: ParamGroup::B1, i, j: 0 });
    }
    for i in 0..t.hidden {
        for j in 0..t.outputs {
            sites.push(FaultSite { group: ParamGroup::W2, i, j });
        }
    }
    for i in 0..t.outputs {
        sites.push(FaultSite { group: ParamGroup::B2, i, j: 0 });
    }
    sites
}

/// Copy of `q` with the parameter at `site` set to `v`. Validates `v`
/// against the space.
pub fn inject(
    q: &QuantParams,
    site: FaultSite,
    v: i64,
    space: &FaultSpace,
) -> Result<QuantParams, FaultError> {
    site.check(q.topology)?;
    let r = space.range(site.group);
    if !r.contains(v) {
        return Err(FaultError::ValueOutOfSpace {
            group: site.group.name(),
            value: v,
            lo: r.min,
            hi: r.max,
        });
    }
    let mut out = q.clone();
    out.group_values_mut(site.group)[site.storage_index(q.topology)] = v;
    Ok(out)
}

/// Largest and second-largest logit bookkeeping for O(1) single-logit
/// updates: value and first two indices of the maximum, plus the best value
/// strictly below it.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TopTwo {
    v1: i64,
    first1: usize,
    second1: Option<usize>,
    count1: usize,
    v2: Option<i64>,
    first2: usize,
    count2: usize,
}

impl TopTwo {
    fn of(logits: &[i64]) -> Self {
        let mut top = TopTwo { v1: logits[0], first1: 0, second1: None, count1: 1, v2: None, first2: 0, count2: 0 };
        for (idx, &v) in logits.iter().enumerate().skip(1) {
            if v > top.v1 {
                top.v2 = Some(top.v1);
                top.first2 = top.first1;
                top.count2 = top.count1;
                top.v1 = v;
                top.first1 = idx;
                top.second1 = None;
                top.count1 = 1;
            } else if v == top.v1 {
                if top.second1.is_none() {
                    top.second1 = Some(idx);
                }
                top.count1 += 1;
            } else if top.v2.is_none_or(|v2| v > v2) {
                top.v2 = Some(v);
                top.first2 = idx;
                top.count2 = 1;
            } else if top.v2 == Some(v) {
                top.count2 += 1;
            }
        }
        top
    }

    /// Decision when logit `k` alone becomes `y_new`.
    fn decide_with(&self, k: usize, y_new: i64) -> (usize, bool) {
        // Maximum over the other logits.
        let (other_max, other_first, other_multiple) = if self.count1 == 1 && self.first1 == k {
            match self.v2 {
                Some(v2) => (v2, self.first2, self.count2 >= 2),
                None => return (k, false), // k is the only logit
            }
        } else if self.first1 == k {
            // k attains v1 along with others.
            let first = self.second1.expect("count1 >= 2 implies a second index");
            (self.v1, first, self.count1 >= 3)
        } else {
            (self.v1, self.first1, self.count1 >= 2 && self.second1 != Some(k) || self.count1 >= 3)
        };
        if y_new > other_max {
            (k, false)
        } else if y_new == other_max {
            (k.min(other_first), true)
        } else {
            (other_first, other_multiple)
        }
    }
}

/// Per-input fault-free state: everything the incremental path patches.
#[derive(Debug, Clone)]
pub(crate) struct InputCache {
    pub(crate) bits: [u8; 8],
    pub(crate) pre_hidden: Vec<i64>,
    pub(crate) hidden: Vec<i64>,
    pub(crate) logits: Vec<i64>,
    pub(crate) label: usize,
    pub(crate) decision: usize,
    pub(crate) tie: bool,
    pub(crate) top: TopTwo,
}

/// Fault-free traces for every input plus a transposed copy of `W2`
/// (column access turned contiguous for the rank-one logit updates).
#[derive(Debug, Clone)]
pub struct EngineCache {
    pub(crate) inputs: Vec<InputCache>,
    /// `w2t[j * outputs + k] = W2[k][j]`.
    pub(crate) w2t: Vec<i64>,
}

pub fn build_cache(q: &QuantParams, samples: &[Sample]) -> EngineCache {
    let t = q.topology;
    let inputs = samples
        .iter()
        .map(|s| {
            let tr = forward_int(q, s.input);
            InputCache {
                bits: encode_input(s.input),
                top: TopTwo::of(&tr.logits),
                pre_hidden: tr.pre_hidden,
                hidden: tr.hidden,
                logits: tr.logits,
                label: s.label,
                decision: tr.decision,
                tie: tr.tie,
            }
        })
        .collect();
    let mut w2t = vec![0i64; t.hidden * t.outputs];
    for k in 0..t.outputs {
        for j in 0..t.hidden {
            w2t[j * t.outputs + k] = q.w2[k * t.hidden + j];
        }
    }
    EngineCache { inputs, w2t }
}

/// Argmax after every logit moves by `dh * w2t_col[k]`.
fn scan_decision(logits: &[i64], col: &[i64], dh: i64) -> (usize, bool) {
    let mut best = logits[0] + dh * col[0];
    let mut best_idx = 0usize;
    let mut tie = false;
    for k in 1..logits.len() {
        let y = logits[k] + dh * col[k];
        if y > best {
            best = y;
            best_idx = k;
            tie = false;
        } else if y == best {
            tie = true;
        }
    }
    (best_idx, tie)
}

/// Decision of the injected model on sample `sample_idx`, computed from the
/// cache: identical to `forward_int` on `inject(q, site, v)` but touching
/// only what the fault reaches.
pub fn incremental_forward(
    q: &QuantParams,
    cache: &EngineCache,
    site: FaultSite,
    v: i64,
    sample_idx: usize,
) -> (usize, bool) {
    let t = q.topology;
    let input = &cache.inputs[sample_idx];
    match site.group {
        ParamGroup::B2 => {
            let k = site.i;
            input.top.decide_with(k, input.logits[k] + (v - q.b2[k]))
        }
        ParamGroup::W2 => {
            let (j, k) = (site.i, site.j);
            let y_new = input.logits[k] + (v - q.w2_at(k, j)) * input.hidden[j];
            input.top.decide_with(k, y_new)
        }
        ParamGroup::B1 => {
            let j = site.i;
            let pre_new = input.pre_hidden[j] + (v - q.b1[j]);
            let dh = pre_new.max(0) - input.hidden[j];
            if dh == 0 {
                (input.decision, input.tie)
            } else {
                scan_decision(&input.logits, &cache.w2t[j * t.outputs..(j + 1) * t.outputs], dh)
            }
        }
        ParamGroup::W1 => {
            let (i, j) = (site.i, site.j);
            if input.bits[i] == 0 {
                return (input.decision, input.tie);
            }
            let pre_new = input.pre_hidden[j] + (v - q.w1_at(j, i));
            let dh = pre_new.max(0) - input.hidden[j];
            if dh == 0 {
                (input.decision, input.tie)
            } else {
                scan_decision(&input.logits, &cache.w2t[j * t.outputs..(j + 1) * t.outputs], dh)
            }
        }
    }
}

#[inline]
fn is_faulty(decision: usize, tie: bool, label: usize) -> bool {
    decision != label || tie
}

/// Internal per-site evaluation with optional oracle sampling.
struct SiteOutcome {
    per_value: Vec<u64>,
    faulty_pairs: u64,
    oracle_checked: u64,
    oracle_mismatches: u64,
}

/// `oracle_stride` = 0 disables sampling; otherwise every tuple whose global
/// index (`tuple_base` + local offset) is a multiple of the stride is re-run
/// through the full forward pass.
fn site_outcome(
    q: &QuantParams,
    cache: &EngineCache,
    site: FaultSite,
    space: &FaultSpace,
    tuple_base: u64,
    oracle_stride: u64,
) -> SiteOutcome {
    let t = q.topology;
    let range = space.range(site.group);
    let current = q.group_values(site.group)[site.storage_index(t)];
    let n_inputs = cache.inputs.len() as u64;
    let mut per_value = Vec::with_capacity(range.corrupted_count() as usize);
    let mut faulty_pairs = 0u64;
    let mut oracle_checked = 0u64;
    let mut oracle_mismatches = 0u64;
    let mut scratch: Option<QuantParams> = None;

    let mut value_offset = 0u64;
    for v in range.min..=range.max {
        if v == current {
            continue;
        }
        let mut count = 0u64;
        for (sample_idx, input) in cache.inputs.iter().enumerate() {
            let (decision, tie) = incremental_forward(q, cache, site, v, sample_idx);
            let faulty = is_faulty(decision, tie, input.label);
            if faulty {
                count += 1;
            }
            if oracle_stride != 0 {
                let tuple_idx = tuple_base + value_offset * n_inputs + sample_idx as u64;
                if tuple_idx % oracle_stride == 0 {
                    let injected = scratch.get_or_insert_with(|| q.clone());
                    let idx = site.storage_index(t);
                    let keep = injected.group_values(site.group)[idx];
                    injected.group_values_mut(site.group)[idx] = v;
                    let x = {
                        let mut byte = 0u8;
                        for (b, &bit) in input.bits.iter().enumerate() {
                            byte |= bit << b;
                        }
                        byte
                    };
                    let full = forward_int(injected, x);
                    injected.group_values_mut(site.group)[idx] = keep;
                    oracle_checked += 1;
                    if (full.decision, full.tie) != (decision, tie)
                        || is_faulty(full.decision, full.tie, input.label) != faulty
                    {
                        oracle_mismatches += 1;
                    }
                }
            }
        }
        per_value.push(count);
        faulty_pairs += count;
        value_offset += 1;
    }
    SiteOutcome { per_value, faulty_pairs, oracle_checked, oracle_mismatches }
}

/// Misclassified-input count for each corrupted value at one site, in
/// ascending value order (the correct value is skipped).
pub fn evaluate_site(
    q: &QuantParams,
    cache: &EngineCache,
    site: FaultSite,
    space: &FaultSpace,
) -> Result<Vec<(i64, u64)>, FaultError> {
    site.check(q.topology)?;
    space.validate_model(q)?;
    let outcome = site_outcome(q, cache, site, space, 0, 0);
    let range = space.range(site.group);
    let current = q.group_values(site.group)[site.storage_index(q.topology)];
    let values = (range.min..=range.max).filter(|&v| v != current);
    Ok(values.zip(outcome.per_value).collect())
}

/// Faulty (value, input) pairs per group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub w1: u64,
    pub b1: u64,
    pub w2: u64,
    pub b2: u64,
}

impl GroupCounts {
    pub fn total(&self) -> u64 {
        self.w1 + self.b1 + self.w2 + self.b2
    }

    fn add(&mut self, group: ParamGroup, n: u64) {
        match group {
            ParamGroup::W1 => self.w1 += n,
            ParamGroup::B1 => self.b1 += n,
            ParamGroup::W2 => self.w2 += n,
            ParamGroup::B2 => self.b2 += n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerSiteCount {
    pub site: FaultSite,
    pub faulty_pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    /// SHA-256 over the campaign parameters' canonical JSON.
    pub model_hash: String,
    pub space: FaultSpace,
    pub inputs: usize,
    /// Site subsampling stride used (1 = every site).
    pub site_stride: usize,
    pub sites_evaluated: usize,
    pub totals: GroupCounts,
    pub total_faulty: u64,
    /// Evaluated tuples: sum over evaluated sites of corrupted values times
    /// inputs.
    pub denominator: u64,
    /// `100 * total_faulty / denominator`.
    pub percent_faults: f64,
    pub oracle_sample_rate: f64,
    pub oracle_checked: u64,
    pub oracle_mismatches: u64,
    pub per_site: Vec<PerSiteCount>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CampaignOptions {
    /// Fraction of tuples to re-run through the full forward pass.
    pub oracle_sample_rate: f64,
    /// Evaluate only every `site_stride`-th site (spot-check mode); the
    /// denominator shrinks to match.
    pub site_stride: usize,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        Self { oracle_sample_rate: 1e-3, site_stride: 1 }
    }
}

/// Identifies in-memory quantized parameters (topology, precision, values,
/// widths) for report metadata.
pub fn params_hash(q: &QuantParams) -> String {
    let json = serde_json::to_string(q).expect("QuantParams serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs the exhaustive campaign. Work is partitioned by site across the
/// current rayon pool; per-site counts land in a fixed-order vector and are
/// reduced sequentially, so the report is bit-identical for any worker
/// count.
pub fn run_campaign(
    q: &QuantParams,
    space: &FaultSpace,
    samples: &[Sample],
    options: &CampaignOptions,
) -> Result<FaultReport, FaultError> {
    if options.site_stride == 0 {
        return Err(FaultError::InvalidOptions("site_stride must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&options.oracle_sample_rate) {
        return Err(FaultError::InvalidOptions(format!(
            "oracle_sample_rate must be in [0, 1], got {}",
            options.oracle_sample_rate
        )));
    }
    space.validate_model(q)?;
    let accuracy = accuracy_int(q, samples);
    if accuracy != 1.0 {
        return Err(FaultError::ImperfectModel(accuracy));
    }

    let cache = build_cache(q, samples);
    let sites: Vec<FaultSite> = enumerate_sites(q.topology)
        .into_iter()
        .enumerate()
        .filter(|(idx, _)| idx % options.site_stride == 0)
        .map(|(_, s)| s)
        .collect();

    // Global tuple indices for oracle sampling: prefix sums over the
    // evaluated sites, so the choice of sampled tuples is independent of
    // worker count.
    let n_inputs = samples.len() as u64;
    let mut tuple_bases = Vec::with_capacity(sites.len());
    let mut acc = 0u64;
    for site in &sites {
        tuple_bases.push(acc);
        acc += space.corrupted_per_site(site.group) * n_inputs;
    }
    let denominator = acc;
    let oracle_stride = if options.oracle_sample_rate == 0.0 {
        0
    } else {
        ((1.0 / options.oracle_sample_rate).round() as u64).max(1)
    };

    let outcomes: Vec<(u64, u64, u64)> = sites
        .par_iter()
        .zip(tuple_bases.par_iter())
        .map(|(site, &base)| {
            let o = site_outcome(q, &cache, *site, space, base, oracle_stride);
            (o.faulty_pairs, o.oracle_checked, o.oracle_mismatches)
        })
        .collect();

    let mut totals = GroupCounts::default();
    let mut per_site = Vec::with_capacity(sites.len());
    let mut oracle_checked = 0u64;
    let mut oracle_mismatches = 0u64;
    for (site, &(faulty_pairs, checked, mismatches)) in sites.iter().zip(&outcomes) {
        totals.add(site.group, faulty_pairs);
        per_site.push(PerSiteCount { site: *site, faulty_pairs });
        oracle_checked += checked;
        oracle_mismatches += mismatches;
    }
    let total_faulty = totals.total();

    Ok(FaultReport {
        model_hash: params_hash(q),
        space: *space,
        inputs: samples.len(),
        site_stride: options.site_stride,
        sites_evaluated: sites.len(),
        totals,
        total_faulty,
        denominator,
        percent_faults: 100.0 * total_faulty as f64 / denominator as f64,
        oracle_sample_rate: options.oracle_sample_rate,
        oracle_checked,
        oracle_mismatches,
        per_site,
    })
}

/// Per-site CSV: `group,i,j,faulty_pairs` in campaign site order (`j` is 0
/// for bias sites).
pub fn per_site_csv(report: &FaultReport) -> String {
    per_site_counts_csv(&report.per_site)
}

/// [`per_site_csv`] over bare counts (margin predictions share the layout).
pub fn per_site_counts_csv(per_site: &[PerSiteCount]) -> String {
    let mut out = String::from("group,i,j,faulty_pairs\n");
    for row in per_site {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.site.group.name(),
            row.site.i,
            row.site.j,
            row.faulty_pairs
        ));
    }
    out
}
