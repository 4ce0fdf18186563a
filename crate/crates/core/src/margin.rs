//! Exact safe-perturbation intervals.
//!
//! For an input the model classifies correctly, each parameter has a set of
//! perturbations `δ` (added to its stored value) that leave the decision
//! intact. That set is always an interval of integers containing 0:
//!
//! - an output bias or output weight moves a single logit monotonically;
//! - a hidden bias or input weight moves one hidden unit through the ReLU,
//!   and the hidden value `max(0, a+δ)` is monotone in `δ` while every
//!   pairwise decision constraint is monotone in the hidden value.
//!
//! Endpoints are computed in exact integer arithmetic — including the ReLU
//! clamp, where the interval becomes one-sidedly infinite because pushing
//! the pre-activation further negative changes nothing. Ties count as
//! faulty, matching the fault engine, so "safe" here means the correct
//! logit stays *strictly* largest.
//!
//! Predictions are checkable: [`validate_predictions`] replays every
//! (site, value, input) tuple through the brute-force engine and the
//! interval verdict side by side and reports the first disagreement, if any
//! ever appears.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fault::{
    build_cache, enumerate_sites, incremental_forward, params_hash, EngineCache, FaultError,
    FaultReport, FaultSite, FaultSpace, GroupCounts, PerSiteCount, ValueRange,
};
use crate::model::{accuracy_int, forward_int, ParamGroup, QuantParams, Sample};

#[derive(Debug, Error)]
pub enum MarginError {
    #[error("model misclassifies input {input:#04x} fault-free; no safe interval exists")]
    NotCorrect { input: u8 },
    #[error(transparent)]
    Fault(#[from] FaultError),
}

/// Integer extended with infinities. The derived ordering is the natural
/// one: `NegInf < Finite(_) < PosInf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Extended {
    NegInf,
    Finite(i64),
    PosInf,
}

impl Extended {
    pub fn is_finite(&self) -> bool {
        matches!(self, Extended::Finite(_))
    }
}

/// The perturbations `δ` of one parameter that keep one input's decision
/// correct: all `δ` with `lo ≤ δ ≤ hi`. Always contains 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeInterval {
    pub site: FaultSite,
    pub input: u8,
    pub lo: Extended,
    pub hi: Extended,
}

impl SafeInterval {
    pub fn contains(&self, delta: i64) -> bool {
        self.lo <= Extended::Finite(delta) && Extended::Finite(delta) <= self.hi
    }

    pub fn is_unbounded(&self) -> bool {
        self.lo == Extended::NegInf && self.hi == Extended::PosInf
    }
}

/// Exact floor of `a / b` for `b != 0`.
fn floor_div(a: i64, b: i64) -> i64 {
    let q = a / b;
    if a % b != 0 && (a < 0) != (b < 0) {
        q - 1
    } else {
        q
    }
}

/// Exact ceiling of `a / b` for `b != 0`.
fn ceil_div(a: i64, b: i64) -> i64 {
    let q = a / b;
    if a % b != 0 && (a < 0) == (b < 0) {
        q + 1
    } else {
        q
    }
}

/// Raw interval endpoints for a site given one input's fault-free state.
///
/// `logits`/`label` describe the correct decision; `pre_hidden`, `hidden`,
/// `bits` feed the first-layer cases; `w2_col` is the fault's hidden unit's
/// `W2` column (`w2_col[k] = W2[k][j]`), only read for `W1`/`b1` sites;
/// `max_other` is the largest non-label logit.
struct SiteView<'a> {
    logits: &'a [i64],
    label: usize,
    max_other: i64,
    pre_hidden: &'a [i64],
    bits: &'a [u8; 8],
}

fn interval_endpoints(
    q: &QuantParams,
    view: &SiteView,
    w2t: &[i64],
    site: FaultSite,
) -> (Extended, Extended) {
    let n = q.topology.outputs;
    let y_c = view.logits[view.label];
    match site.group {
        ParamGroup::B2 => {
            let k = site.i;
            single_logit_bounds(k, view.label, y_c, view.logits[k], view.max_other, 1)
        }
        ParamGroup::W2 => {
            let (j, k) = (site.i, site.j);
            let h = view.pre_hidden[j].max(0);
            if h == 0 {
                (Extended::NegInf, Extended::PosInf)
            } else {
                single_logit_bounds(k, view.label, y_c, view.logits[k], view.max_other, h)
            }
        }
        ParamGroup::B1 => {
            let j = site.i;
            hidden_unit_bounds(view, &w2t[j * n..(j + 1) * n], view.pre_hidden[j])
        }
        ParamGroup::W1 => {
            let (i, j) = (site.i, site.j);
            if view.bits[i] == 0 {
                (Extended::NegInf, Extended::PosInf)
            } else {
                hidden_unit_bounds(view, &w2t[j * n..(j + 1) * n], view.pre_hidden[j])
            }
        }
    }
}

/// Bounds when logit `k` alone shifts by `δ * scale` (`scale > 0`): the
/// decision survives iff a losing logit stays strictly below `y_c`, or the
/// winning logit stays strictly above every rival.
fn single_logit_bounds(
    k: usize,
    label: usize,
    y_c: i64,
    y_k: i64,
    max_other: i64,
    scale: i64,
) -> (Extended, Extended) {
    debug_assert!(scale > 0);
    if k == label {
        // y_c + δ·scale ≥ max_other + 1
        let lo = ceil_div(max_other - y_c + 1, scale);
        (Extended::Finite(lo), Extended::PosInf)
    } else {
        // y_k + δ·scale ≤ y_c − 1
        let hi = floor_div(y_c - y_k - 1, scale);
        (Extended::NegInf, Extended::Finite(hi))
    }
}

/// Bounds when hidden unit `j` (pre-activation `a`) absorbs `δ`: its value
/// becomes `max(0, a+δ)` and every logit `k` shifts by the value change
/// times `col[k]`.
///
/// Step 1 bounds the hidden-value change `dh`: for each rival `r` the
/// constraint is `dh · (col[r] − col[c]) ≤ (y_c − y_r) − 1`. Step 2 maps the
/// `dh` window back through the ReLU: the downward direction saturates at
/// `dh = −h`, so a lower bound at or below `−h` is no bound at all.
fn hidden_unit_bounds(view: &SiteView, col: &[i64], a: i64) -> (Extended, Extended) {
    let h = a.max(0);
    let c = view.label;
    let mut dh_lo = Extended::NegInf;
    let mut dh_hi = Extended::PosInf;
    let g_c = col[c];
    for (r, (&y_r, &col_r)) in view.logits.iter().zip(col).enumerate() {
        if r == c {
            continue;
        }
        let g = col_r - g_c;
        if g == 0 {
            continue;
        }
        let m = view.logits[c] - y_r - 1; // ≥ 0 on a correct input
        if g > 0 {
            dh_hi = dh_hi.min(Extended::Finite(floor_div(m, g)));
        } else {
            dh_lo = dh_lo.max(Extended::Finite(ceil_div(m, g)));
        }
    }
    let hi = match dh_hi {
        Extended::Finite(dh) => Extended::Finite(h + dh - a),
        unbounded => unbounded,
    };
    let lo = match dh_lo {
        Extended::Finite(dl) if dl > -h => Extended::Finite(h + dl - a),
        _ => Extended::NegInf,
    };
    (lo, hi)
}

fn checked_trace(q: &QuantParams, sample: Sample) -> Result<(Vec<i64>, Vec<i64>), MarginError> {
    let tr = forward_int(q, sample.input);
    if tr.decision != sample.label || tr.tie {
        return Err(MarginError::NotCorrect { input: sample.input });
    }
    Ok((tr.pre_hidden, tr.logits))
}

fn single_op_interval(
    q: &QuantParams,
    site: FaultSite,
    sample: Sample,
) -> Result<SafeInterval, MarginError> {
    site.check(q.topology)?;
    let (pre_hidden, logits) = checked_trace(q, sample)?;
    let max_other = logits
        .iter()
        .enumerate()
        .filter(|&(r, _)| r != sample.label)
        .map(|(_, &y)| y)
        .max()
        .unwrap_or(i64::MIN);
    let bits = crate::model::encode_input(sample.input);
    let t = q.topology;
    let mut w2t = vec![0i64; t.hidden * t.outputs];
    for k in 0..t.outputs {
        for j in 0..t.hidden {
            w2t[j * t.outputs + k] = q.w2[k * t.hidden + j];
        }
    }
    let view = SiteView {
        logits: &logits,
        label: sample.label,
        max_other,
        pre_hidden: &pre_hidden,
        bits: &bits,
    };
    let (lo, hi) = interval_endpoints(q, &view, &w2t, site);
    debug_assert!(lo <= Extended::Finite(0) && Extended::Finite(0) <= hi);
    Ok(SafeInterval { site, input: sample.input, lo, hi })
}

/// Safe interval for an output-layer bias fault at output `f2`.
pub fn output_bias_interval(
    q: &QuantParams,
    f2: usize,
    sample: Sample,
) -> Result<SafeInterval, MarginError> {
    single_op_interval(q, FaultSite { group: ParamGroup::B2, i: f2, j: 0 }, sample)
}

/// Safe interval for an output-layer weight fault on the connection from
/// hidden unit `f1` to output `f2`.
pub fn output_weight_interval(
    q: &QuantParams,
    f1: usize,
    f2: usize,
    sample: Sample,
) -> Result<SafeInterval, MarginError> {
    single_op_interval(q, FaultSite { group: ParamGroup::W2, i: f1, j: f2 }, sample)
}

/// Safe interval for a hidden-layer bias fault at hidden unit `f1`.
pub fn hidden_bias_interval(
    q: &QuantParams,
    f1: usize,
    sample: Sample,
) -> Result<SafeInterval, MarginError> {
    single_op_interval(q, FaultSite { group: ParamGroup::B1, i: f1, j: 0 }, sample)
}

/// Safe interval for an input-layer weight fault on the connection from
/// input bit `f0` to hidden unit `f1`.
pub fn input_weight_interval(
    q: &QuantParams,
    f0: usize,
    f1: usize,
    sample: Sample,
) -> Result<SafeInterval, MarginError> {
    single_op_interval(q, FaultSite { group: ParamGroup::W1, i: f0, j: f1 }, sample)
}

/// Corrupted values of `range` (excluding `current`) falling outside the
/// safe window `[current+lo, current+hi]`.
fn faulty_values_in(range: ValueRange, current: i64, lo: Extended, hi: Extended) -> u64 {
    let safe_lo = match lo {
        Extended::NegInf => range.min,
        Extended::Finite(d) => current.saturating_add(d).max(range.min),
        Extended::PosInf => unreachable!("lo is never +inf"),
    };
    let safe_hi = match hi {
        Extended::PosInf => range.max,
        Extended::Finite(d) => current.saturating_add(d).min(range.max),
        Extended::NegInf => unreachable!("hi is never -inf"),
    };
    debug_assert!(safe_lo <= current && current <= safe_hi);
    // |range| − |safe ∩ range|; the correct value sits in both.
    ((range.max - range.min) - (safe_hi - safe_lo)) as u64
}

/// One site's margin summary: the intersection of its per-input intervals
/// and its predicted faulty (value, input) pairs under the report's space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteMargin {
    pub site: FaultSite,
    /// Intersection over all inputs — replacing the parameter anywhere in
    /// `[value+lo, value+hi]` keeps every input correct.
    pub lo: Extended,
    pub hi: Extended,
    pub faulty_pairs: u64,
}

/// Margin-predicted campaign outcome; field-compatible with the engine's
/// report so the two can be diffed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub model_hash: String,
    pub space: FaultSpace,
    pub inputs: usize,
    pub totals: GroupCounts,
    pub total_faulty: u64,
    pub denominator: u64,
    pub percent_faults: f64,
    pub per_site: Vec<SiteMargin>,
}

impl MarginReport {
    /// Engine-shaped per-site counts, for direct comparison.
    pub fn per_site_counts(&self) -> Vec<PerSiteCount> {
        self.per_site
            .iter()
            .map(|m| PerSiteCount { site: m.site, faulty_pairs: m.faulty_pairs })
            .collect()
    }
}

fn campaign_preconditions(
    q: &QuantParams,
    space: &FaultSpace,
    samples: &[Sample],
) -> Result<(), MarginError> {
    space.validate_model(q)?;
    let accuracy = accuracy_int(q, samples);
    if accuracy != 1.0 {
        return Err(MarginError::Fault(FaultError::ImperfectModel(accuracy)));
    }
    Ok(())
}

/// Predicts the entire campaign from intervals alone: no injection, no
/// forward passes beyond the fault-free cache.
pub fn predict_campaign(
    q: &QuantParams,
    space: &FaultSpace,
    samples: &[Sample],
) -> Result<MarginReport, MarginError> {
    campaign_preconditions(q, space, samples)?;
    let cache = build_cache(q, samples);
    let max_other = max_other_per_input(&cache);
    let sites = enumerate_sites(q.topology);

    let per_site: Vec<SiteMargin> = sites
        .par_iter()
        .map(|&site| {
            let range = space.range(site.group);
            let current = q.group_values(site.group)[site.storage_index(q.topology)];
            let mut agg_lo = Extended::NegInf;
            let mut agg_hi = Extended::PosInf;
            let mut faulty_pairs = 0u64;
            for (idx, input) in cache.inputs.iter().enumerate() {
                let view = SiteView {
                    logits: &input.logits,
                    label: input.label,
                    max_other: max_other[idx],
                    pre_hidden: &input.pre_hidden,
                    bits: &input.bits,
                };
                let (lo, hi) = interval_endpoints(q, &view, &cache.w2t, site);
                agg_lo = agg_lo.max(lo);
                agg_hi = agg_hi.min(hi);
                faulty_pairs += faulty_values_in(range, current, lo, hi);
            }
            SiteMargin { site, lo: agg_lo, hi: agg_hi, faulty_pairs }
        })
        .collect();

    Ok(assemble_report(q, space, samples.len(), per_site))
}

fn max_other_per_input(cache: &EngineCache) -> Vec<i64> {
    cache
        .inputs
        .iter()
        .map(|input| {
            input
                .logits
                .iter()
                .enumerate()
                .filter(|&(r, _)| r != input.label)
                .map(|(_, &y)| y)
                .max()
                .unwrap_or(i64::MIN)
        })
        .collect()
}

fn assemble_report(
    q: &QuantParams,
    space: &FaultSpace,
    inputs: usize,
    per_site: Vec<SiteMargin>,
) -> MarginReport {
    let mut totals = GroupCounts::default();
    let mut denominator = 0u64;
    for m in &per_site {
        match m.site.group {
            ParamGroup::W1 => totals.w1 += m.faulty_pairs,
            ParamGroup::B1 => totals.b1 += m.faulty_pairs,
            ParamGroup::W2 => totals.w2 += m.faulty_pairs,
            ParamGroup::B2 => totals.b2 += m.faulty_pairs,
        }
        denominator += space.corrupted_per_site(m.site.group) * inputs as u64;
    }
    let total_faulty = totals.total();
    MarginReport {
        model_hash: params_hash(q),
        space: *space,
        inputs,
        totals,
        total_faulty,
        denominator,
        percent_faults: 100.0 * total_faulty as f64 / denominator as f64,
        per_site,
    }
}

/// A (site, value, input) tuple where interval prediction and brute-force
/// injection disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub site: FaultSite,
    pub value: i64,
    pub input: u8,
    pub margin_says_safe: bool,
    pub engine_says_faulty: bool,
}

/// Outcome of the tuple-for-tuple cross-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tuples_checked: u64,
    pub disagreements: u64,
    /// First disagreement in (site, input, value) order, if any.
    pub first_counterexample: Option<Counterexample>,
    pub margin: MarginReport,
    pub engine_per_site: Vec<PerSiteCount>,
    pub engine_totals: GroupCounts,
}

impl ValidationReport {
    pub fn agrees(&self) -> bool {
        self.disagreements == 0
    }
}

/// Replays every tuple through both paths: the interval verdict and the
/// incremental brute-force engine. Any mismatch is counted and the first
/// one (in deterministic site/input/value order) is reported.
pub fn validate_predictions(
    q: &QuantParams,
    space: &FaultSpace,
    samples: &[Sample],
) -> Result<ValidationReport, MarginError> {
    validate_predictions_subset(q, space, samples, 1)
}

/// [`validate_predictions`] restricted to every `site_stride`-th site, for
/// spot checks on large models. Counts and per-site lists cover only the
/// visited sites; the embedded report's denominator stays the full-space
/// constant, so its percentage is meaningful only at stride 1.
pub fn validate_predictions_subset(
    q: &QuantParams,
    space: &FaultSpace,
    samples: &[Sample],
    site_stride: usize,
) -> Result<ValidationReport, MarginError> {
    if site_stride == 0 {
        return Err(MarginError::Fault(FaultError::InvalidOptions(
            "site_stride must be >= 1".into(),
        )));
    }
    campaign_preconditions(q, space, samples)?;
    let cache = build_cache(q, samples);
    let max_other = max_other_per_input(&cache);
    let sites: Vec<_> =
        enumerate_sites(q.topology).into_iter().step_by(site_stride).collect();

    struct SiteValidation {
        margin: SiteMargin,
        engine_faulty: u64,
        checked: u64,
        disagreements: u64,
        first: Option<Counterexample>,
    }

    let outcomes: Vec<SiteValidation> = sites
        .par_iter()
        .map(|&site| {
            let range = space.range(site.group);
            let current = q.group_values(site.group)[site.storage_index(q.topology)];
            let mut agg_lo = Extended::NegInf;
            let mut agg_hi = Extended::PosInf;
            let mut predicted = 0u64;
            let mut engine_faulty = 0u64;
            let mut checked = 0u64;
            let mut disagreements = 0u64;
            let mut first = None;
            for (idx, input) in cache.inputs.iter().enumerate() {
                let view = SiteView {
                    logits: &input.logits,
                    label: input.label,
                    max_other: max_other[idx],
                    pre_hidden: &input.pre_hidden,
                    bits: &input.bits,
                };
                let (lo, hi) = interval_endpoints(q, &view, &cache.w2t, site);
                agg_lo = agg_lo.max(lo);
                agg_hi = agg_hi.min(hi);
                let x = {
                    let mut byte = 0u8;
                    for (b, &bit) in input.bits.iter().enumerate() {
                        byte |= bit << b;
                    }
                    byte
                };
                for v in range.min..=range.max {
                    if v == current {
                        continue;
                    }
                    let safe = lo <= Extended::Finite(v - current)
                        && Extended::Finite(v - current) <= hi;
                    if !safe {
                        predicted += 1;
                    }
                    let (decision, tie) = incremental_forward(q, &cache, site, v, idx);
                    let faulty = decision != input.label || tie;
                    if faulty {
                        engine_faulty += 1;
                    }
                    checked += 1;
                    if safe == faulty {
                        disagreements += 1;
                        if first.is_none() {
                            first = Some(Counterexample {
                                site,
                                value: v,
                                input: x,
                                margin_says_safe: safe,
                                engine_says_faulty: faulty,
                            });
                        }
                    }
                }
            }
            SiteValidation {
                margin: SiteMargin { site, lo: agg_lo, hi: agg_hi, faulty_pairs: predicted },
                engine_faulty,
                checked,
                disagreements,
                first,
            }
        })
        .collect();

    let mut engine_totals = GroupCounts::default();
    let mut engine_per_site = Vec::with_capacity(outcomes.len());
    let mut tuples_checked = 0u64;
    let mut disagreements = 0u64;
    let mut first_counterexample = None;
    let mut margins = Vec::with_capacity(outcomes.len());
    for (site, o) in sites.iter().zip(outcomes) {
        match site.group {
            ParamGroup::W1 => engine_totals.w1 += o.engine_faulty,
            ParamGroup::B1 => engine_totals.b1 += o.engine_faulty,
            ParamGroup::W2 => engine_totals.w2 += o.engine_faulty,
            ParamGroup::B2 => engine_totals.b2 += o.engine_faulty,
        }
        engine_per_site.push(PerSiteCount { site: *site, faulty_pairs: o.engine_faulty });
        tuples_checked += o.checked;
        disagreements += o.disagreements;
        if first_counterexample.is_none() {
            first_counterexample = o.first;
        }
        margins.push(o.margin);
    }
    let margin = assemble_report(q, space, samples.len(), margins);

    Ok(ValidationReport {
        tuples_checked,
        disagreements,
        first_counterexample,
        margin,
        engine_per_site,
        engine_totals,
    })
}

/// Compares a margin prediction against an engine report site by site
/// (helper for the `--validate` CLI path and tests).
pub fn diff_reports(margin: &MarginReport, engine: &FaultReport) -> Option<FaultSite> {
    if margin.per_site.len() != engine.per_site.len() {
        return engine.per_site.first().map(|p| p.site);
    }
    margin
        .per_site
        .iter()
        .zip(&engine.per_site)
        .find(|(m, e)| m.site != e.site || m.faulty_pairs != e.faulty_pairs)
        .map(|(m, _)| m.site)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::{run_campaign, CampaignOptions};
    use crate::model::Topology;
    use crate::testutil::{random_perfect_model, toy_model};

    #[test]
    fn div_helpers() {
        assert_eq!(floor_div(7, 2), 3);
        assert_eq!(floor_div(-7, 2), -4);
        assert_eq!(floor_div(7, -2), -4);
        assert_eq!(floor_div(-7, -2), 3);
        assert_eq!(floor_div(6, 3), 2);
        assert_eq!(ceil_div(7, 2), 4);
        assert_eq!(ceil_div(-7, 2), -3);
        assert_eq!(ceil_div(7, -2), -3);
        assert_eq!(ceil_div(-7, -2), 4);
        assert_eq!(ceil_div(-6, 3), -2);
    }

    #[test]
    fn extended_ordering() {
        assert!(Extended::NegInf < Extended::Finite(i64::MIN));
        assert!(Extended::Finite(i64::MAX) < Extended::PosInf);
        assert!(Extended::Finite(-1) < Extended::Finite(1));
    }

    /// Brute-force oracle: inject `current + delta` directly (no space
    /// restriction) and check the decision on one sample.
    fn brute_safe(q: &QuantParams, site: FaultSite, delta: i64, sample: Sample) -> bool {
        let mut injected = q.clone();
        let idx = site.storage_index(q.topology);
        let current = injected.group_values(site.group)[idx];
        injected.group_values_mut(site.group)[idx] = current + delta;
        let tr = forward_int(&injected, sample.input);
        tr.decision == sample.label && !tr.tie
    }

    fn sweep_check(q: &QuantParams, site: FaultSite, sample: Sample, interval: &SafeInterval) {
        for delta in -120..=120 {
            assert_eq!(
                interval.contains(delta),
                brute_safe(q, site, delta, sample),
                "site {site:?} input {:#04x} delta {delta}, interval {interval:?}",
                sample.input
            );
        }
    }

    #[test]
    fn toy_intervals_match_brute_force_sweeps_everywhere() {
        let (q, samples) = toy_model();
        for site in enumerate_sites(q.topology) {
            for &sample in &samples {
                let interval = single_op_interval(&q, site, sample).unwrap();
                assert!(interval.contains(0), "zero outside {interval:?}");
                sweep_check(&q, site, sample, &interval);
            }
        }
    }

    #[test]
    fn case1_examples() {
        let (q, samples) = toy_model();
        // Input 0, label 0, logits (6, 0, 0, -6): lowering any losing bias
        // is always safe; raising b2[1] is safe up to just below the gap.
        let iv = output_bias_interval(&q, 1, samples[0]).unwrap();
        assert_eq!(iv.lo, Extended::NegInf);
        assert_eq!(iv.hi, Extended::Finite(5)); // y_c - y_1 - 1 = 6 - 0 - 1
        // The winning bias may fall until one below the runner-up gap.
        let iv = output_bias_interval(&q, 0, samples[0]).unwrap();
        assert_eq!(iv.lo, Extended::Finite(-5)); // max_other(0) - 6 + 1
        assert_eq!(iv.hi, Extended::PosInf);
    }

    #[test]
    fn case2_scaling_and_dead_unit() {
        let (q, samples) = toy_model();
        // Input 0 has h = (0, 0): every W2 fault is invisible.
        for j in 0..2 {
            for k in 0..4 {
                let iv = output_weight_interval(&q, j, k, samples[0]).unwrap();
                assert!(iv.is_unbounded());
            }
        }
        // Input 1 (h0 = 4): W2 fault into losing output 3 scales Case 1 by 4.
        let b_like = output_bias_interval(&q, 3, samples[1]).unwrap();
        let w = output_weight_interval(&q, 0, 3, samples[1]).unwrap();
        match (b_like.hi, w.hi) {
            (Extended::Finite(bh), Extended::Finite(wh)) => assert_eq!(wh, floor_div(bh, 4)),
            other => panic!("expected finite bounds, got {other:?}"),
        }
    }

    #[test]
    fn case3_relu_clamp_gives_one_sided_interval() {
        let (q, samples) = toy_model();
        // Input 0: pre-activations are 0, so pushing b1 further negative
        // changes nothing -> lo must be -inf. Raising b1 activates units
        // that feed rivals, so hi is finite.
        for j in 0..2 {
            let iv = hidden_bias_interval(&q, j, samples[0]).unwrap();
            assert_eq!(iv.lo, Extended::NegInf);
            assert!(iv.hi.is_finite(), "{iv:?}");
        }
        // Input 3: both units at 4, b1 faults can kill them -> both sides
        // finite or the sweep would have caught it; just cross-check.
        for j in 0..2 {
            let site = FaultSite { group: ParamGroup::B1, i: j, j: 0 };
            let iv = hidden_bias_interval(&q, j, samples[3]).unwrap();
            sweep_check(&q, site, samples[3], &iv);
        }
    }

    #[test]
    fn case4_bit_gate() {
        let (q, samples) = toy_model();
        // Input 1 = 0b01: bit 1 is zero, so W1 faults in column 1 are
        // invisible; bit 0 faults behave exactly like b1 faults on unit 0.
        let iv = input_weight_interval(&q, 1, 0, samples[1]).unwrap();
        assert!(iv.is_unbounded());
        let w = input_weight_interval(&q, 0, 0, samples[1]).unwrap();
        let b = hidden_bias_interval(&q, 0, samples[1]).unwrap();
        assert_eq!((w.lo, w.hi), (b.lo, b.hi));
    }

    #[test]
    fn rejects_misclassified_input() {
        let (q, _) = toy_model();
        let wrong = Sample { input: 0x01, label: 3 };
        assert!(matches!(
            output_bias_interval(&q, 0, wrong),
            Err(MarginError::NotCorrect { input: 0x01 })
        ));
    }

    #[test]
    fn prediction_equals_engine_on_toy_model() {
        let (q, samples) = toy_model();
        for space in [FaultSpace::full8(), FaultSpace::min_widths(&q), FaultSpace::observed(&q)] {
            let predicted = predict_campaign(&q, &space, &samples).unwrap();
            let engine = run_campaign(
                &q,
                &space,
                &samples,
                &CampaignOptions { oracle_sample_rate: 0.0, site_stride: 1 },
            )
            .unwrap();
            assert_eq!(predicted.total_faulty, engine.total_faulty);
            assert_eq!(predicted.totals, engine.totals);
            assert_eq!(predicted.denominator, engine.denominator);
            assert_eq!(predicted.per_site_counts(), engine.per_site);
            assert_eq!(diff_reports(&predicted, &engine), None);
        }
    }

    #[test]
    fn prediction_equals_engine_on_random_perfect_models() {
        let mut found = 0;
        for seed in 0..40u64 {
            let Some((q, samples)) = random_perfect_model(seed) else { continue };
            found += 1;
            let space = FaultSpace::full8();
            let report = validate_predictions(&q, &space, &samples).unwrap();
            assert!(
                report.agrees(),
                "seed {seed}: {} disagreements, first {:?}",
                report.disagreements,
                report.first_counterexample
            );
            assert_eq!(report.margin.totals, report.engine_totals);
            if found >= 8 {
                break;
            }
        }
        assert!(found >= 8, "only {found} perfect random models found");
    }

    #[test]
    fn validation_counts_every_tuple() {
        let (q, samples) = toy_model();
        let space = FaultSpace::full8();
        let report = validate_predictions(&q, &space, &samples).unwrap();
        // 30 sites x 255 corrupted values x 4 inputs.
        assert_eq!(report.tuples_checked, 30 * 255 * 4);
        assert_eq!(report.disagreements, 0);
        assert!(report.first_counterexample.is_none());
        assert_eq!(report.margin.denominator, report.tuples_checked);
    }

    #[test]
    fn per_site_interval_is_intersection() {
        let (q, samples) = toy_model();
        let space = FaultSpace::full8();
        let report = predict_campaign(&q, &space, &samples).unwrap();
        for m in &report.per_site {
            for &sample in &samples {
                let iv = single_op_interval(&q, m.site, sample).unwrap();
                assert!(iv.lo <= m.lo && m.hi <= iv.hi, "site {:?}", m.site);
            }
            // The intersection itself must still be safe everywhere:
            // spot-check its finite endpoints against brute force.
            for endpoint in [m.lo, m.hi] {
                if let Extended::Finite(d) = endpoint {
                    if d.abs() <= 200 {
                        for &sample in &samples {
                            assert!(brute_safe(&q, m.site, d, sample));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn all_intervals_cover_space_means_zero_predicted() {
        // A model whose logit gaps dwarf the space: one hidden unit stuck at
        // zero weight influence. Label is always 0 and b2[0] towers over
        // everything any 4-bit fault could do.
        let t = Topology::new(8, 1, 2);
        let q = QuantParams {
            topology: t,
            precision: 1,
            w1: vec![0; 8],
            b1: vec![0],
            w2: vec![0, 0],
            b2: vec![10_000, 0],
            widths: crate::model::GroupWidths { w1: 4, b1: 4, w2: 4, b2: 15 },
        };
        let samples: Vec<Sample> = (0..8u8).map(|x| Sample { input: x, label: 0 }).collect();
        let space = FaultSpace::FullWidth(crate::model::GroupWidths::uniform(4));
        // b2 at width 15 exceeds a 4-bit space; widen only what the space
        // needs — instead restrict to the observed range for b2-like groups.
        let space_ok = matches!(space.validate_model(&q), Err(_));
        assert!(space_ok, "4-bit space cannot hold b2 = 10000");
        let space = FaultSpace::ObservedRange(crate::fault::GroupRanges {
            w1: ValueRange { min: -8, max: 7 },
            b1: ValueRange { min: -8, max: 7 },
            w2: ValueRange { min: -8, max: 7 },
            b2: ValueRange { min: 0, max: 10_000 },
        });
        let report = predict_campaign(&q, &space, &samples).unwrap();
        // W1, b1, W2 faults bounded by ±8 cannot close a 10000 gap; b2[1]
        // raised to at most 10000 still ties at worst... which IS faulty.
        // So only b2 can contribute.
        assert_eq!(report.totals.w1, 0);
        assert_eq!(report.totals.b1, 0);
        assert_eq!(report.totals.w2, 0);
        let engine = run_campaign(
            &q,
            &space,
            &samples,
            &CampaignOptions { oracle_sample_rate: 0.01, site_stride: 1 },
        )
        .unwrap();
        assert_eq!(report.total_faulty, engine.total_faulty);
    }
}
