//! Validation-time call masks, call and non-call losses, the fact-leakage probe and the
//! acceptability judge harness.

mod analyze;
mod judge;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analyze::{analyze, rows_to_csv, write_svg, AnalysisRow, JudgedRecord};
pub use judge::{
    fill_template, judge_acceptability, judge_many, parse_verdict, JudgeError, JudgeVerdict, MockJudge,
    ACCEPTABILITY_TEMPLATE,
};

use crate::cascade::{generate, CallPolicy, CascadeConfig, CascadeError, CascadeSession, ScriptedPartner};
use crate::maskbuild::quota;
use crate::model::LanguageModel;
use crate::objective::{log_softmax, log_softmax_excluding, LogitSlab, ObjectiveError};
use crate::tokenmap::{SubwordTokenizer, TokenError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{what} has length {got}, expected {expected}")]
    Shape { what: &'static str, got: usize, expected: usize },
    #[error("mean over an empty set of {0}")]
    EmptyMean(&'static str),
    #[error("fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

/// Positions a call-augmented model would delegate on a validation batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCallMask {
    pub bits: Vec<bool>,
    pub fraction: f64,
    /// Positions where the call logit was the top logit before capping or filling.
    pub top_count: usize,
}

impl EvalCallMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), EvalError> {
    if got != expected {
        return Err(EvalError::Shape { what, got, expected });
    }
    Ok(())
}

/// Marks `round(fraction * valid)` positions: those where the call logit is the top logit,
/// capped to the quota by highest call logit, or filled up to it with the next highest
/// call logits. Ties go to the lower position.
pub fn extract_eval_call_mask(
    logits: &LogitSlab,
    valid: &[bool],
    call_id: u32,
    fraction: f64,
) -> Result<EvalCallMask, EvalError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    check_len("valid", valid.len(), logits.positions)?;
    let c = call_id as usize;
    let call: Vec<f32> = (0..logits.positions).map(|i| logits.row(i)[c]).collect();
    let is_top = |i: usize| {
        let row = logits.row(i);
        row.iter().enumerate().all(|(j, &x)| j == c || row[c] >= x)
    };
    let want = quota(fraction, valid.iter().filter(|&&v| v).count());
    let by_call = |set: &mut Vec<usize>| set.sort_by(|&a, &b| call[b].total_cmp(&call[a]).then(a.cmp(&b)));
    let mut top: Vec<usize> = (0..logits.positions).filter(|&i| valid[i] && is_top(i)).collect();
    let top_count = top.len();
    by_call(&mut top);
    let mut chosen: Vec<usize> = top.iter().copied().take(want).collect();
    if chosen.len() < want {
        let mut rest: Vec<usize> = (0..logits.positions).filter(|&i| valid[i] && !is_top(i)).collect();
        by_call(&mut rest);
        chosen.extend(rest.into_iter().take(want - chosen.len()));
    }
    let mut bits = vec![false; logits.positions];
    for i in chosen {
        bits[i] = true;
    }
    Ok(EvalCallMask { bits, fraction, top_count })
}

/// Mean NLL of the targets on the mask under the plain softmax, and on the valid
/// complement under the call-excluded distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallLosses {
    pub call: Option<f64>,
    pub non_call: Option<f64>,
    pub call_count: usize,
    pub non_call_count: usize,
}

impl CallLosses {
    pub fn call_loss(&self) -> Result<f64, EvalError> {
        self.call.ok_or(EvalError::EmptyMean("call positions"))
    }

    pub fn non_call_loss(&self) -> Result<f64, EvalError> {
        self.non_call.ok_or(EvalError::EmptyMean("non-call positions"))
    }
}

pub fn masked_losses(
    logits: &LogitSlab,
    targets: &[u32],
    valid: &[bool],
    mask: &[bool],
    call_id: u32,
) -> Result<CallLosses, EvalError> {
    check_len("targets", targets.len(), logits.positions)?;
    check_len("valid", valid.len(), logits.positions)?;
    check_len("mask", mask.len(), logits.positions)?;
    let (mut cs, mut cn, mut ns, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for i in (0..logits.positions).filter(|&i| valid[i]) {
        let t = targets[i] as usize;
        if mask[i] {
            cs -= log_softmax(logits.row(i))[t];
            cn += 1;
        } else {
            if t == call_id as usize {
                return Err(ObjectiveError::TargetIsCall { position: i }.into());
            }
            ns -= log_softmax_excluding(logits.row(i), call_id as usize, i)?[t];
            nn += 1;
        }
    }
    Ok(CallLosses {
        call: (cn > 0).then(|| cs / cn as f64),
        non_call: (nn > 0).then(|| ns / nn as f64),
        call_count: cn,
        non_call_count: nn,
    })
}

/// Call and non-call losses of a model and a baseline, both on the model's mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComparison {
    pub model: CallLosses,
    pub baseline: CallLosses,
}

pub fn call_noncall_losses(
    model: &LogitSlab,
    baseline: &LogitSlab,
    targets: &[u32],
    valid: &[bool],
    mask: &EvalCallMask,
    call_id: u32,
) -> Result<LossComparison, EvalError> {
    check_len("baseline positions", baseline.positions, model.positions)?;
    Ok(LossComparison {
        model: masked_losses(model, targets, valid, &mask.bits, call_id)?,
        baseline: masked_losses(baseline, targets, valid, &mask.bits, call_id)?,
    })
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Whether `gold` occurs in `generation`, ignoring case and runs of whitespace.
pub fn contains_answer(generation: &str, gold: &str) -> bool {
    normalize_ws(generation).contains(&normalize_ws(gold))
}

/// Fraction of generations that contain their gold answer.
pub fn leakage_score<S: AsRef<str>, G: AsRef<str>>(pairs: &[(S, G)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyMean("leakage items"));
    }
    let hits = pairs.iter().filter(|(g, a)| contains_answer(g.as_ref(), a.as_ref())).count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub prompt: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub score: f64,
    pub generations: Vec<String>,
}

/// Generates greedily with calling disabled and scores answer containment.
/// Prompts are encoded as-is; include the end-of-text prefix in `prompt` if wanted.
pub fn fact_leakage(
    model: &dyn LanguageModel,
    tokenizer: &dyn SubwordTokenizer,
    items: &[QaItem],
    max_new_tokens: usize,
    repetition_penalty: f32,
) -> Result<LeakageReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyMean("leakage items"));
    }
    let partner = ScriptedPartner::constant("");
    let config =
        CascadeConfig { max_new_tokens, repetition_penalty, policy: CallPolicy::Suppressed, ..Default::default() };
    let mut generations = Vec::with_capacity(items.len());
    for item in items {
        let prompt = tokenizer.encode(&item.prompt)?;
        let mut session = CascadeSession::new(config, prompt, tokenizer, &partner);
        generations.push(generate(&mut session, model)?.text);
    }
    let pairs: Vec<(&str, &str)> =
        generations.iter().map(String::as_str).zip(items.iter().map(|i| i.answer.as_str())).collect();
    Ok(LeakageReport { score: leakage_score(&pairs)?, generations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slab(rows: &[Vec<f32>]) -> LogitSlab {
        LogitSlab::new(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    /// Independent statement of the rule: rank the top set, then the rest, by call logit.
    fn oracle(rows: &[Vec<f32>], call: usize, fraction: f64) -> Vec<bool> {
        let n = rows.len();
        let q = (fraction * n as f64).round() as usize;
        let top = |r: &Vec<f32>| r.iter().enumerate().filter(|(j, _)| *j != call).all(|(_, &x)| r[call] >= x);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            (top(&rows[b]), rows[b][call]).partial_cmp(&(top(&rows[a]), rows[a][call])).unwrap().then(a.cmp(&b))
        });
        let mut bits = vec![false; n];
        for &i in &order[..q] {
            bits[i] = true;
        }
        bits
    }

    #[test]
    fn cap_branch_keeps_highest_call_logits() {
        // Call (index 2) is top at 4 of 10 positions; quota 2 keeps the two largest.
        let mut rows = vec![vec![1.0, 0.0, -1.0]; 10];
        for (i, v) in [(1, 2.0), (3, 5.0), (6, 4.0), (8, 3.0)] {
            rows[i][2] = v;
        }
        let m = extract_eval_call_mask(&slab(&rows), &[true; 10], 2, 0.2).unwrap();
        assert_eq!(m.top_count, 4);
        assert_eq!(m.bits.iter().positions(), [3, 6]);
    }

    #[test]
    fn fill_branch_adds_next_highest() {
        let rows: Vec<Vec<f32>> = (0..20).map(|i| vec![10.0, 0.0, i as f32 * 0.1]).collect();
        let m = extract_eval_call_mask(&slab(&rows), &[true; 20], 2, 0.15).unwrap();
        assert_eq!(m.top_count, 0);
        assert_eq!(m.bits.iter().positions(), [17, 18, 19]);
    }

    trait Positions {
        fn positions(self) -> Vec<usize>;
    }

    impl<'a, I: Iterator<Item = &'a bool>> Positions for I {
        fn positions(self) -> Vec<usize> {
            self.enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
        }
    }

    #[test]
    fn padding_is_never_marked() {
        let rows = vec![vec![0.0, 5.0]; 4];
        let m = extract_eval_call_mask(&slab(&rows), &[true, false, true, false], 1, 0.5).unwrap();
        assert_eq!(m.bits, [true, false, false, false]);
    }

    #[test]
    fn empty_mask_partition_is_an_error() {
        let s = slab(&[vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 0.0]]);
        let l = masked_losses(&s, &[0, 1], &[true; 2], &[false; 2], 2).unwrap();
        assert!(matches!(l.call_loss(), Err(EvalError::EmptyMean(_))));
        let expect = -(log_softmax(&[0.0, 1.0])[0] + log_softmax(&[1.0, 0.0])[1]) / 2.0;
        assert!((l.non_call_loss().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_model_and_baseline_agree() {
        let s = slab(&[vec![0.3, 1.0, 2.0], vec![1.0, 0.0, 0.5], vec![0.0, 0.0, 0.0]]);
        let m = EvalCallMask { bits: vec![true, false, false], fraction: 0.3, top_count: 1 };
        let c = call_noncall_losses(&s, &s, &[1, 0, 1], &[true; 3], &m, 2).unwrap();
        assert_eq!(c.model, c.baseline);
    }

    #[test]
    fn leakage_containment() {
        assert!(contains_answer("born in   1769 in Corsica", "1769 in corsica"));
        assert!(!contains_answer("born in 1768", "1769"));
        assert_eq!(leakage_score(&[("a 17", "17"), ("b", "17")]).unwrap(), 0.5);
        assert!(leakage_score::<&str, &str>(&[]).is_err());
    }

    proptest! {
        #[test]
        fn eval_mask_matches_sort_oracle(
            rows in prop::collection::vec(prop::collection::vec(-3i8..3, 5), 1..200),
            fraction in prop::sample::select(vec![0.0, 0.05, 0.15, 0.3, 0.5, 1.0]),
        ) {
            let rows: Vec<Vec<f32>> = rows.into_iter().map(|r| r.into_iter().map(|x| x as f32 * 0.5).collect()).collect();
            let n = rows.len();
            let m = extract_eval_call_mask(&slab(&rows), &vec![true; n], 4, fraction).unwrap();
            prop_assert_eq!(m.count(), quota(fraction, n));
            prop_assert_eq!(m.bits, oracle(&rows, 4, fraction));
        }

        #[test]
        fn weighted_partitions_recombine(
            rows in prop::collection::vec(prop::collection::vec(-4.0f32..4.0, 4), 2..30),
            seed in any::<u64>(),
        ) {
            let n = rows.len();
            let targets: Vec<u32> = (0..n).map(|i| ((seed >> (i % 60)) % 3) as u32).collect();
            let mask: Vec<bool> = (0..n).map(|i| (seed >> ((i + 7) % 64)) & 1 == 1).collect();
            let s = slab(&rows);
            let l = masked_losses(&s, &targets, &vec![true; n], &mask, 3).unwrap();
            let mixed: f64 = (0..n)
                .map(|i| {
                    let t = targets[i] as usize;
                    if mask[i] {
                        let lse = rows[i].iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
                        lse - rows[i][t] as f64
                    } else {
                        let lse = rows[i][..3].iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
                        lse - rows[i][t] as f64
                    }
                })
                .sum::<f64>() / n as f64;
            let combined = (l.call.unwrap_or(0.0) * l.call_count as f64 + l.non_call.unwrap_or(0.0) * l.non_call_count as f64) / n as f64;
            prop_assert!((combined - mixed).abs() <= 1e-6 * mixed.abs().max(1.0));
        }

        #[test]
        fn leakage_monotone_under_added_hit(hits in prop::collection::vec(any::<bool>(), 1..40)) {
            let pairs: Vec<(&str, &str)> = hits.iter().map(|&h| (if h { "x 42" } else { "x" }, "42")).collect();
            let before = leakage_score(&pairs).unwrap();
            let mut more = pairs.clone();
            more.push(("42", "42"));
            prop_assert!(leakage_score(&more).unwrap() >= before);
        }
    }
}
