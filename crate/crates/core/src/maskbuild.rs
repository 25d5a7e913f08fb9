//! Call and ignore masks for every delegation method.
//!
//! Quotas are per batch: `round_half_up(fraction * valid tokens)`. Padding is never selected
//! and does not count towards the denominator. Rank ties go to the lower index.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factlabel::WordClass;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("method {method} requires {input}")]
    MissingInput { method: Method, input: &'static str },
    #[error("{field} has length {got}, expected {expected}")]
    LengthMismatch { field: &'static str, got: usize, expected: usize },
    #[error("batch has no valid tokens")]
    NoValidTokens,
    #[error("{name} = {value} is outside [0, 1]")]
    InvalidFraction { name: &'static str, value: f64 },
    #[error("non-finite loss at position {0}")]
    NonFiniteLoss(usize),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    LossRandom,
    Rho1,
    LlmJudge,
    SpacyOnly,
    Lacy,
    SpacyRefloss,
    LacyIgnorefacts,
    LacyIgnore,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Baseline,
        Method::LossRandom,
        Method::Rho1,
        Method::LlmJudge,
        Method::SpacyOnly,
        Method::Lacy,
        Method::SpacyRefloss,
        Method::LacyIgnorefacts,
        Method::LacyIgnore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::LossRandom => "loss_random",
            Method::Rho1 => "rho1",
            Method::LlmJudge => "llm_judge",
            Method::SpacyOnly => "spacy_only",
            Method::Lacy => "lacy",
            Method::SpacyRefloss => "spacy_refloss",
            Method::LacyIgnorefacts => "lacy_ignorefacts",
            Method::LacyIgnore => "lacy_ignore",
        }
    }

    /// Whether the ranking uses the current model's per-token losses.
    pub fn needs_losses(self) -> bool {
        matches!(self, Method::Rho1 | Method::Lacy | Method::LacyIgnorefacts | Method::LacyIgnore)
    }

    pub fn needs_ref_losses(self) -> bool {
        matches!(self, Method::Rho1 | Method::SpacyRefloss)
    }

    pub fn needs_judge_labels(self) -> bool {
        self == Method::LlmJudge
    }

    pub fn needs_classes(self) -> bool {
        matches!(
            self,
            Method::SpacyOnly | Method::Lacy | Method::SpacyRefloss | Method::LacyIgnorefacts | Method::LacyIgnore
        )
    }

    pub fn has_ignore_mask(self) -> bool {
        matches!(self, Method::LacyIgnorefacts | Method::LacyIgnore)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = MaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| MaskError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub call_fraction: f64,
    pub ignore_fraction: f64,
    pub rng_seed: u64,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        MethodSpec { method, call_fraction: 0.15, ignore_fraction: 0.15, rng_seed: 0 }
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        for (name, value) in [("call_fraction", self.call_fraction), ("ignore_fraction", self.ignore_fraction)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(MaskError::InvalidFraction { name, value });
            }
        }
        Ok(())
    }
}

/// Per-target-position inputs for one batch. `classes`, `losses` and the optional fields are
/// aligned with the prediction targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub ordinal: u64,
    pub token_ids: Vec<u32>,
    pub classes: Vec<WordClass>,
    pub losses: Vec<f32>,
    pub ref_losses: Option<Vec<f32>>,
    pub judge_calls: Option<Vec<bool>>,
    pub valid: Vec<bool>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskWarning {
    /// `call_fraction * valid < 1`; the call mask is empty.
    CallQuotaBelowOne,
    /// Fewer eligible tokens than the quota.
    CallClamped {
        wanted: usize,
        got: usize,
    },
    IgnoreClamped {
        wanted: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelegationMask {
    pub call: Vec<bool>,
    pub ignore: Vec<bool>,
    pub method: MethodSpec,
    pub warnings: Vec<MaskWarning>,
}

impl DelegationMask {
    pub fn empty(len: usize, method: MethodSpec) -> Self {
        DelegationMask { call: vec![false; len], ignore: vec![false; len], method, warnings: Vec::new() }
    }

    pub fn call_count(&self) -> usize {
        self.call.iter().filter(|c| **c).count()
    }

    pub fn ignore_count(&self) -> usize {
        self.ignore.iter().filter(|c| **c).count()
    }
}

/// `round(fraction * n)` with halves rounded up.
pub fn quota(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 0.5 + 1e-9).floor() as usize
}

/// Indices of the `count` largest eligible values (fewer if not enough are eligible),
/// ties broken towards the lower index. Returned in ascending index order.
pub fn select_top_fraction(values: &[f64], eligible: &[bool], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| eligible[i]).collect();
    if count < idx.len() {
        idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        idx.truncate(count);
        idx.sort_unstable();
    }
    idx
}

/// Seed for the per-batch generator, derived from the root seed and the batch ordinal.
pub fn batch_seed(seed: u64, ordinal: u64) -> u64 {
    let mut z = seed ^ ordinal.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn batch_rng(seed: u64, ordinal: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(batch_seed(seed, ordinal))
}

fn check_len<T>(field: &'static str, v: &[T], expected: usize) -> Result<(), MaskError> {
    if v.len() != expected {
        return Err(MaskError::LengthMismatch { field, got: v.len(), expected });
    }
    Ok(())
}

/// Builds the call and ignore masks of `spec.method` for one batch.
pub fn build_mask(batch: &TrainingBatch, spec: &MethodSpec) -> Result<DelegationMask, MaskError> {
    spec.validate()?;
    let n = batch.len();
    let method = spec.method;
    check_len("valid", &batch.valid, n)?;
    check_len("losses", &batch.losses, n)?;
    if method.needs_classes() {
        if batch.classes.is_empty() && n > 0 {
            return Err(MaskError::MissingInput { method, input: "token classes" });
        }
        check_len("classes", &batch.classes, n)?;
    }
    let ref_losses = match (&batch.ref_losses, method.needs_ref_losses()) {
        (Some(r), true) => {
            check_len("ref_losses", r, n)?;
            Some(r)
        }
        (None, true) => return Err(MaskError::MissingInput { method, input: "reference losses" }),
        _ => None,
    };
    let judge = match (&batch.judge_calls, method.needs_judge_labels()) {
        (Some(j), true) => {
            check_len("judge_calls", j, n)?;
            Some(j)
        }
        (None, true) => return Err(MaskError::MissingInput { method, input: "judge labels" }),
        _ => None,
    };
    let valid_count = batch.valid_count();
    if valid_count == 0 {
        return Err(MaskError::NoValidTokens);
    }
    for i in 0..n {
        let bad = !batch.losses[i].is_finite() || ref_losses.is_some_and(|r| !r[i].is_finite());
        if batch.valid[i] && bad {
            return Err(MaskError::NonFiniteLoss(i));
        }
    }

    let mut mask = DelegationMask::empty(n, *spec);
    let call_quota = quota(spec.call_fraction, valid_count);
    let below_one = spec.call_fraction * (valid_count as f64) < 1.0;
    let is_fact = |i: usize| batch.valid[i] && batch.classes[i] == WordClass::Fact;
    let losses: Vec<f64> = batch.losses.iter().map(|&l| l as f64).collect();

    let quota_select = |mask: &mut DelegationMask, values: &[f64], eligible: &[bool]| {
        if below_one {
            mask.warnings.push(MaskWarning::CallQuotaBelowOne);
            return;
        }
        let chosen = select_top_fraction(values, eligible, call_quota);
        if chosen.len() < call_quota {
            mask.warnings.push(MaskWarning::CallClamped { wanted: call_quota, got: chosen.len() });
        }
        for i in chosen {
            mask.call[i] = true;
        }
    };

    match method {
        Method::Baseline => {}
        Method::LossRandom => {
            let mut rng = batch_rng(spec.rng_seed, batch.ordinal);
            for i in 0..n {
                if batch.valid[i] {
                    mask.call[i] = rng.gen::<f64>() < spec.call_fraction;
                }
            }
        }
        Method::Rho1 => {
            let r = ref_losses.expect("checked above");
            // Bottom of (L - L_ref) is the top of (L_ref - L).
            let scores: Vec<f64> = (0..n).map(|i| r[i] as f64 - losses[i]).collect();
            quota_select(&mut mask, &scores, &batch.valid);
        }
        Method::LlmJudge => {
            let j = judge.expect("checked above");
            for (c, (&v, &d)) in mask.call.iter_mut().zip(batch.valid.iter().zip(j)) {
                *c = v && d;
            }
        }
        Method::SpacyOnly => {
            // Uniform subsample without replacement: the facts with the largest random keys.
            let mut rng = batch_rng(spec.rng_seed, batch.ordinal);
            let keys: Vec<f64> = (0..n).map(|i| if is_fact(i) { rng.gen::<f64>() } else { 0.0 }).collect();
            let eligible: Vec<bool> = (0..n).map(is_fact).collect();
            quota_select(&mut mask, &keys, &eligible);
        }
        Method::Lacy | Method::SpacyRefloss | Method::LacyIgnorefacts | Method::LacyIgnore => {
            let values: Vec<f64> = match method {
                Method::SpacyRefloss => ref_losses.expect("checked above").iter().map(|&l| l as f64).collect(),
                _ => losses.clone(),
            };
            let eligible: Vec<bool> = (0..n).map(is_fact).collect();
            quota_select(&mut mask, &values, &eligible);
        }
    }

    if method.has_ignore_mask() {
        for i in 0..n {
            mask.ignore[i] = is_fact(i) && !mask.call[i];
        }
    }
    if method == Method::LacyIgnore {
        let wanted = quota(spec.ignore_fraction, valid_count);
        let have = mask.ignore_count();
        if have < wanted {
            let eligible: Vec<bool> =
                (0..n).map(|i| batch.valid[i] && batch.classes[i] == WordClass::Other && !mask.call[i]).collect();
            let extra = select_top_fraction(&losses, &eligible, wanted - have);
            if extra.len() < wanted - have {
                mask.warnings.push(MaskWarning::IgnoreClamped { wanted, got: have + extra.len() });
            }
            for i in extra {
                mask.ignore[i] = true;
            }
        }
    }
    for w in &mask.warnings {
        log::warn!("batch {}: {} mask warning {:?}", batch.ordinal, method, w);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use WordClass::{Fact as F, Grammatical as G, Other as O};

    fn batch(classes: Vec<WordClass>, losses: Vec<f32>) -> TrainingBatch {
        let n = classes.len();
        TrainingBatch {
            ordinal: 0,
            token_ids: vec![0; n],
            classes,
            losses,
            ref_losses: None,
            judge_calls: None,
            valid: vec![true; n],
        }
    }

    fn calls(m: &DelegationMask) -> Vec<usize> {
        (0..m.call.len()).filter(|&i| m.call[i]).collect()
    }

    #[test]
    fn ten_token_lacy_example() {
        let b = batch(vec![F, O, F, G, F, O, O, F, G, O], vec![7.1, 2.0, 6.5, 0.5, 1.0, 3.0, 2.5, 8.0, 0.4, 2.2]);
        let spec = MethodSpec { call_fraction: 0.2, ..MethodSpec::new(Method::Lacy) };
        let m = build_mask(&b, &spec).unwrap();
        assert_eq!(calls(&m), [0, 7]);
        assert!(m.ignore.iter().all(|i| !i));
    }

    #[test]
    fn sixty_percent_of_facts_when_a_quarter_are_facts() {
        // 25% facts and a 15% call budget delegate 60% of the facts, the highest-loss ones.
        let n = 400;
        let classes: Vec<WordClass> = (0..n).map(|i| if i % 4 == 0 { F } else { O }).collect();
        let losses: Vec<f32> = (0..n).map(|i| ((i * 37) % 101) as f32).collect();
        let m = build_mask(&batch(classes.clone(), losses.clone()), &MethodSpec::new(Method::Lacy)).unwrap();
        let facts: Vec<usize> = (0..n).filter(|i| classes[*i] == F).collect();
        assert_eq!(m.call_count() as f64 / facts.len() as f64, 0.6);
        let min_called = facts.iter().filter(|&&i| m.call[i]).map(|&i| losses[i]).fold(f32::MAX, f32::min);
        let max_kept = facts.iter().filter(|&&i| !m.call[i]).map(|&i| losses[i]).fold(f32::MIN, f32::max);
        assert!(min_called >= max_kept);
    }

    #[test]
    fn baseline_is_empty() {
        let b = batch(vec![F, O, G], vec![1.0, 2.0, 3.0]);
        let m = build_mask(&b, &MethodSpec::new(Method::Baseline)).unwrap();
        assert_eq!(m.call_count() + m.ignore_count(), 0);
    }

    #[test]
    fn no_facts_gives_empty_lacy_mask_with_warning() {
        let b = batch(vec![O; 20], vec![1.0; 20]);
        let m = build_mask(&b, &MethodSpec::new(Method::Lacy)).unwrap();
        assert_eq!(m.call_count(), 0);
        assert_eq!(m.warnings, [MaskWarning::CallClamped { wanted: 3, got: 0 }]);
    }

    #[test]
    fn quota_below_one_is_empty_with_warning() {
        let b = batch(vec![F; 6], vec![1.0; 6]);
        let m = build_mask(&b, &MethodSpec::new(Method::Lacy)).unwrap();
        assert_eq!(m.call_count(), 0);
        assert_eq!(m.warnings, [MaskWarning::CallQuotaBelowOne]);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(quota(0.15, 10), 2);
        assert_eq!(quota(0.25, 2), 1);
        assert_eq!(quota(0.15, 20), 3);
        assert_eq!(quota(0.0, 100), 0);
    }

    #[test]
    fn select_top_fraction_examples() {
        assert_eq!(select_top_fraction(&[3.0, 3.0, 1.0], &[true; 3], 1), [0]);
        assert!(select_top_fraction(&[3.0, 3.0, 1.0], &[true; 3], 0).is_empty());
        assert_eq!(select_top_fraction(&[1.0, 5.0, 2.0], &[true, false, true], 5), [0, 2]);
    }

    #[test]
    fn missing_inputs_are_configuration_errors() {
        let b = batch(vec![F; 4], vec![1.0; 4]);
        assert!(matches!(build_mask(&b, &MethodSpec::new(Method::Rho1)), Err(MaskError::MissingInput { .. })));
        assert!(matches!(build_mask(&b, &MethodSpec::new(Method::LlmJudge)), Err(MaskError::MissingInput { .. })));
        let mut b2 = b.clone();
        b2.valid = vec![false; 4];
        assert_eq!(build_mask(&b2, &MethodSpec::new(Method::Baseline)), Err(MaskError::NoValidTokens));
    }

    #[test]
    fn padding_is_never_selected() {
        let mut b = batch(vec![F; 20], (0..20).map(|i| i as f32).collect());
        for v in &mut b.valid[10..] {
            *v = false;
        }
        let m = build_mask(&b, &MethodSpec { call_fraction: 0.5, ..MethodSpec::new(Method::Lacy) }).unwrap();
        assert_eq!(calls(&m), [5, 6, 7, 8, 9]);
    }

    #[test]
    fn lacy_ignore_covers_facts_and_fills_quota() {
        let classes = vec![F, F, O, O, O, G, G, O, O, O, F, O, O, O, O, O, O, O, O, O];
        let losses: Vec<f32> = (0..20).map(|i| (i % 7) as f32).collect();
        let m = build_mask(&batch(classes.clone(), losses), &MethodSpec::new(Method::LacyIgnore)).unwrap();
        assert_eq!(m.call_count(), 3);
        assert_eq!(m.ignore_count(), 3);
        #[allow(clippy::needless_range_loop)]
        for i in 0..20 {
            assert!(!(m.call[i] && m.ignore[i]));
            if classes[i] == F {
                assert!(m.call[i] || m.ignore[i]);
            }
            if classes[i] == G {
                assert!(!m.ignore[i]);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_batch() -> impl Strategy<Value = TrainingBatch> {
            (1usize..64).prop_flat_map(|n| {
                (
                    proptest::collection::vec(0u8..3, n),
                    proptest::collection::vec(0u32..64, n),
                    proptest::collection::vec(0u32..64, n),
                    proptest::collection::vec(proptest::bool::weighted(0.9), n),
                    proptest::collection::vec(any::<bool>(), n),
                    any::<u64>(),
                )
                    .prop_map(|(c, l, r, v, j, ord)| TrainingBatch {
                        ordinal: ord % 1000,
                        token_ids: vec![1; c.len()],
                        classes: c.into_iter().map(|x| WordClass::from_u8(x).unwrap()).collect(),
                        losses: l.into_iter().map(|x| x as f32 / 8.0).collect(),
                        ref_losses: Some(r.into_iter().map(|x| x as f32 / 8.0).collect()),
                        judge_calls: Some(j),
                        valid: v,
                    })
            })
        }

        proptest! {
            #[test]
            fn invariants_hold_for_all_methods(b in arb_batch(), seed in any::<u64>()) {
                prop_assume!(b.valid_count() > 0);
                for method in Method::ALL {
                    let spec = MethodSpec { rng_seed: seed, ..MethodSpec::new(method) };
                    let m = build_mask(&b, &spec).unwrap();
                    for i in 0..b.len() {
                        prop_assert!(!(m.call[i] && m.ignore[i]));
                        prop_assert!(b.valid[i] || !(m.call[i] || m.ignore[i]));
                    }
                    if matches!(method, Method::Lacy | Method::SpacyRefloss | Method::LacyIgnorefacts | Method::LacyIgnore | Method::SpacyOnly) {
                        for i in 0..b.len() {
                            prop_assert!(!m.call[i] || b.classes[i] == WordClass::Fact);
                        }
                        let facts = (0..b.len()).filter(|&i| b.valid[i] && b.classes[i] == WordClass::Fact).count();
                        let q = quota(0.15, b.valid_count());
                        let expected = if 0.15 * b.valid_count() as f64 >= 1.0 { q.min(facts) } else { 0 };
                        prop_assert_eq!(m.call_count(), expected);
                    }
                    if method == Method::LacyIgnore {
                        for i in 0..b.len() {
                            if b.valid[i] && b.classes[i] == WordClass::Fact {
                                prop_assert!(m.call[i] || m.ignore[i]);
                            }
                        }
                    }
                }
            }

            #[test]
            fn rank_methods_ignore_constant_shift(b in arb_batch(), shift in -8i32..8) {
                prop_assume!(b.valid_count() > 0);
                let mut shifted = b.clone();
                for l in &mut shifted.losses {
                    *l += shift as f32;
                }
                for method in [Method::Lacy, Method::Rho1, Method::LacyIgnore] {
                    let spec = MethodSpec::new(method);
                    prop_assert_eq!(build_mask(&b, &spec).unwrap().call, build_mask(&shifted, &spec).unwrap().call);
                }
            }

            #[test]
            fn seeded_methods_are_deterministic(b in arb_batch(), seed in any::<u64>()) {
                prop_assume!(b.valid_count() > 0);
                for method in [Method::LossRandom, Method::SpacyOnly] {
                    let spec = MethodSpec { rng_seed: seed, ..MethodSpec::new(method) };
                    prop_assert_eq!(build_mask(&b, &spec).unwrap(), build_mask(&b, &spec).unwrap());
                }
            }

            #[test]
            fn select_matches_sort_oracle(values in proptest::collection::vec(0u8..20, 0..200), count in 0usize..250, mask_bits in any::<u64>()) {
                let eligible: Vec<bool> = (0..values.len()).map(|i| (mask_bits >> (i % 64)) & 1 == 1 || i % 3 == 0).collect();
                let vals: Vec<f64> = values.iter().map(|&v| v as f64).collect();
                // Oracle: repeatedly take the first maximum among the remaining eligible values.
                let mut remaining = eligible.clone();
                let mut oracle = Vec::new();
                for _ in 0..count {
                    let mut best: Option<usize> = None;
                    for i in 0..vals.len() {
                        if remaining[i] && best.is_none_or(|b| vals[i] > vals[b]) {
                            best = Some(i);
                        }
                    }
                    match best {
                        Some(b) => { remaining[b] = false; oracle.push(b); }
                        None => break,
                    }
                }
                oracle.sort_unstable();
                prop_assert_eq!(select_top_fraction(&vals, &eligible, count), oracle);
            }
        }
    }
}
