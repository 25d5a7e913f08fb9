//! Masked next-token objectives over per-position logits.
//!
//! With call mask `C`, ignore mask `I` and `N` valid positions, the combined loss is
//!
//! ```text
//! L = -(1/N) * sum_i [ (1 - C_i)(1 - I_i) log p_noCALL(t_i) + C_i log p(CALL) ]
//! ```
//!
//! where `p_noCALL` is the softmax with the `<CALL>` logit set to minus infinity. The
//! ignore-only loss divides by the number of non-ignored positions instead and uses the
//! plain softmax. All arithmetic is done in `f64` log space.

use thiserror::Error;

use crate::maskbuild::DelegationMask;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("{what}: got {got}, expected {expected}")]
    Shape { what: &'static str, got: usize, expected: usize },
    #[error("logit at position {position} is NaN or +inf")]
    NonFinite { position: usize },
    #[error("no probability mass outside <CALL> at position {position}")]
    NoNonCallMass { position: usize },
    #[error("target at position {position} is the <CALL> token, which has zero probability without calling")]
    TargetIsCall { position: usize },
    #[error("target {target} at position {position} is outside the vocabulary")]
    TargetOutOfRange { position: usize, target: u32 },
    #[error("mean over an empty set of positions")]
    EmptyMean,
}

/// Row-major `positions x vocab` scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSlab {
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl LogitSlab {
    pub fn new(positions: usize, vocab: usize, data: Vec<f32>) -> Result<Self, ObjectiveError> {
        if data.len() != positions * vocab {
            return Err(ObjectiveError::Shape { what: "logit data", got: data.len(), expected: positions * vocab });
        }
        Ok(LogitSlab { positions, vocab, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

fn check_row(row: &[f32], position: usize) -> Result<(), ObjectiveError> {
    if row.iter().any(|x| x.is_nan() || *x == f32::INFINITY) {
        return Err(ObjectiveError::NonFinite { position });
    }
    Ok(())
}

/// Log-probabilities over the entries other than `skip` (which gets minus infinity), or
/// `None` when no kept entry has mass. The normalizer is `max + ln_1p(rest)` with the
/// maximum's own term factored out, so probabilities near one keep their relative precision.
fn log_probs(row: &[f32], skip: Option<usize>) -> Option<Vec<f64>> {
    let kept = |j: usize| Some(j) != skip;
    let (top, max) = row
        .iter()
        .enumerate()
        .filter(|(j, _)| kept(*j))
        .map(|(j, &x)| (j, x as f64))
        .fold((usize::MAX, f64::NEG_INFINITY), |best, (j, x)| if x > best.1 { (j, x) } else { best });
    if max == f64::NEG_INFINITY {
        return None;
    }
    let rest: f64 =
        row.iter().enumerate().filter(|(j, _)| kept(*j) && *j != top).map(|(_, &x)| (x as f64 - max).exp()).sum();
    let tail = rest.ln_1p();
    Some(
        row.iter()
            .enumerate()
            .map(|(j, &x)| if kept(j) { (x as f64 - max) - tail } else { f64::NEG_INFINITY })
            .collect(),
    )
}

/// Log-probabilities of one row under the plain softmax.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    log_probs(row, None).unwrap_or_else(|| vec![f64::NAN; row.len()])
}

/// Log-probabilities of one row with `call_id` removed and the rest renormalized.
/// The `call_id` entry is minus infinity.
pub fn log_softmax_excluding(row: &[f32], call_id: usize, position: usize) -> Result<Vec<f64>, ObjectiveError> {
    check_row(row, position)?;
    log_probs(row, Some(call_id)).ok_or(ObjectiveError::NoNonCallMass { position })
}

/// Per-position log-distribution excluding `<CALL>`, row-major like the input.
pub fn renormalize_excluding_call(logits: &LogitSlab, call_id: u32) -> Result<Vec<f64>, ObjectiveError> {
    let mut out = Vec::with_capacity(logits.data.len());
    for i in 0..logits.positions {
        out.extend(log_softmax_excluding(logits.row(i), call_id as usize, i)?);
    }
    Ok(out)
}

/// Loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f32>,
    /// Denominator used for the mean.
    pub normalizer: usize,
}

fn check_targets(logits: &LogitSlab, targets: &[u32]) -> Result<(), ObjectiveError> {
    if targets.len() != logits.positions {
        return Err(ObjectiveError::Shape { what: "targets", got: targets.len(), expected: logits.positions });
    }
    for (position, &t) in targets.iter().enumerate() {
        if t as usize >= logits.vocab {
            return Err(ObjectiveError::TargetOutOfRange { position, target: t });
        }
    }
    Ok(())
}

fn check_mask(what: &'static str, mask: &[bool], expected: usize) -> Result<(), ObjectiveError> {
    if mask.len() != expected {
        return Err(ObjectiveError::Shape { what, got: mask.len(), expected });
    }
    Ok(())
}

/// `d(-log p_target)/d logit_j` scaled: `p_j - [j == target]`, with `expm1` for the target
/// so that probabilities near one do not cancel.
fn nll_grad(log_p: f64, is_target: bool, scale: f64) -> f32 {
    let g = if is_target { log_p.exp_m1() } else { log_p.exp() };
    (g * scale) as f32
}

/// Combined call/ignore loss. `N` counts valid positions, ignored ones included.
pub fn loss_with_masks(
    logits: &LogitSlab,
    targets: &[u32],
    mask: &DelegationMask,
    valid: &[bool],
    call_id: u32,
) -> Result<LossOutput, ObjectiveError> {
    loss_with_mask_bits(logits, targets, &mask.call, &mask.ignore, valid, call_id)
}

/// [`loss_with_masks`] over plain bit slices.
pub fn loss_with_mask_bits(
    logits: &LogitSlab,
    targets: &[u32],
    call: &[bool],
    ignore: &[bool],
    valid: &[bool],
    call_id: u32,
) -> Result<LossOutput, ObjectiveError> {
    let p = logits.positions;
    check_targets(logits, targets)?;
    check_mask("call mask", call, p)?;
    check_mask("ignore mask", ignore, p)?;
    check_mask("valid mask", valid, p)?;
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return Err(ObjectiveError::EmptyMean);
    }
    let c = call_id as usize;
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0f32; logits.data.len()];
    for i in 0..p {
        if !valid[i] || (ignore[i] && !call[i]) {
            continue;
        }
        let row = logits.row(i);
        let g = &mut grad[i * logits.vocab..(i + 1) * logits.vocab];
        if call[i] {
            check_row(row, i)?;
            let lp = log_softmax(row);
            total -= lp[c];
            for (j, gj) in g.iter_mut().enumerate() {
                *gj = nll_grad(lp[j], j == c, scale);
            }
        } else {
            let t = targets[i] as usize;
            if t == c {
                return Err(ObjectiveError::TargetIsCall { position: i });
            }
            let lp = log_softmax_excluding(row, c, i)?;
            total -= lp[t];
            for (j, gj) in g.iter_mut().enumerate() {
                if j != c {
                    *gj = nll_grad(lp[j], j == t, scale);
                }
            }
        }
    }
    Ok(LossOutput { loss: total * scale, grad, normalizer: n })
}

/// Mean plain-softmax NLL over valid, non-ignored positions.
pub fn ignore_only_loss(
    logits: &LogitSlab,
    targets: &[u32],
    ignore: &[bool],
    valid: &[bool],
) -> Result<LossOutput, ObjectiveError> {
    let p = logits.positions;
    check_targets(logits, targets)?;
    check_mask("ignore mask", ignore, p)?;
    check_mask("valid mask", valid, p)?;
    let kept = (0..p).filter(|&i| valid[i] && !ignore[i]).count();
    if kept == 0 {
        return Err(ObjectiveError::EmptyMean);
    }
    let scale = 1.0 / kept as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0f32; logits.data.len()];
    for i in (0..p).filter(|&i| valid[i] && !ignore[i]) {
        let row = logits.row(i);
        check_row(row, i)?;
        let lp = log_softmax(row);
        let t = targets[i] as usize;
        total -= lp[t];
        let g = &mut grad[i * logits.vocab..(i + 1) * logits.vocab];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = nll_grad(lp[j], j == t, scale);
        }
    }
    Ok(LossOutput { loss: total * scale, grad, normalizer: kept })
}

/// NLL of each target under the call-excluded distribution; the per-token loss that ranks
/// tokens for mask construction. Invalid positions get 0.
pub fn per_position_nll(
    logits: &LogitSlab,
    targets: &[u32],
    valid: &[bool],
    call_id: u32,
) -> Result<Vec<f32>, ObjectiveError> {
    check_targets(logits, targets)?;
    check_mask("valid mask", valid, logits.positions)?;
    (0..logits.positions)
        .map(|i| {
            if !valid[i] {
                return Ok(0.0);
            }
            let lp = log_softmax_excluding(logits.row(i), call_id as usize, i)?;
            let t = targets[i] as usize;
            if t == call_id as usize {
                return Err(ObjectiveError::TargetIsCall { position: i });
            }
            Ok(-lp[t] as f32)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskbuild::{Method, MethodSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(call: Vec<bool>, ignore: Vec<bool>) -> DelegationMask {
        DelegationMask { call, ignore, method: MethodSpec::new(Method::Lacy), warnings: Vec::new() }
    }

    /// Term-by-term evaluation of the combined loss from explicit probabilities.
    fn oracle_loss(
        logits: &LogitSlab,
        targets: &[u32],
        call: &[bool],
        ignore: &[bool],
        valid: &[bool],
        c: usize,
    ) -> f64 {
        let n = valid.iter().filter(|v| **v).count() as f64;
        let mut sum = 0.0;
        for i in 0..logits.positions {
            if !valid[i] {
                continue;
            }
            let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
            let exps: Vec<f64> = row.iter().map(|x| x.exp()).collect();
            let z: f64 = exps.iter().sum();
            let z_no_call: f64 = z - exps[c];
            let (ci, ii) = (call[i] as u8 as f64, ignore[i] as u8 as f64);
            let t = targets[i] as usize;
            let log_p_nocall = if t == c { 0.0 } else { (exps[t] / z_no_call).ln() };
            sum += (1.0 - ci) * (1.0 - ii) * log_p_nocall + ci * (exps[c] / z).ln();
        }
        -sum / n
    }

    #[test]
    fn uniform_over_four_becomes_uniform_over_three() {
        let lp = log_softmax_excluding(&[0.0; 4], 3, 0).unwrap();
        for &l in &lp[..3] {
            assert!((l.exp() - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(lp[3], f64::NEG_INFINITY);
    }

    #[test]
    fn zero_call_probability_is_a_fixed_point() {
        let row = [0.5f32, -1.0, 2.0, f32::NEG_INFINITY];
        let a = log_softmax(&row);
        let b = log_softmax_excluding(&row, 3, 0).unwrap();
        for j in 0..3 {
            assert!((a[j] - b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn renormalization_errors() {
        assert_eq!(log_softmax_excluding(&[1.0], 0, 4), Err(ObjectiveError::NoNonCallMass { position: 4 }));
        assert_eq!(log_softmax_excluding(&[f32::NAN, 1.0], 1, 0), Err(ObjectiveError::NonFinite { position: 0 }));
    }

    #[test]
    fn renormalized_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let row: Vec<f32> = (0..8).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let c = rng.gen_range(0..8);
            let lp = log_softmax_excluding(&row, c, 0).unwrap();
            let exps: Vec<f64> = row.iter().map(|&x| (x as f64).exp()).collect();
            let z: f64 = exps.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, e)| e).sum();
            for j in 0..8 {
                let expect = if j == c { 0.0 } else { exps[j] / z };
                assert!((lp[j].exp() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_masks_reduce_to_call_excluded_nll() {
        let logits = LogitSlab::new(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let targets = [0, 1];
        let out = loss_with_masks(&logits, &targets, &mask(vec![false; 2], vec![false; 2]), &[true; 2], 2).unwrap();
        let expect = -(log_softmax_excluding(logits.row(0), 2, 0).unwrap()[0]
            + log_softmax_excluding(logits.row(1), 2, 1).unwrap()[1])
            / 2.0;
        assert!((out.loss - expect).abs() < 1e-12);
        // The ignore-only loss uses the plain softmax, so it differs whenever CALL has mass.
        let plain = ignore_only_loss(&logits, &targets, &[false; 2], &[true; 2]).unwrap();
        assert!(plain.loss > out.loss);
    }

    #[test]
    fn certain_call_contributes_zero() {
        let logits = LogitSlab::new(1, 3, vec![f32::NEG_INFINITY, f32::NEG_INFINITY, 0.0]).unwrap();
        let out = loss_with_masks(&logits, &[0], &mask(vec![true], vec![false]), &[true], 2).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn ignore_only_examples() {
        let logits = LogitSlab::new(3, 2, vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let targets = [1, 0, 1];
        let all = ignore_only_loss(&logits, &targets, &[false; 3], &[true; 3]).unwrap();
        let manual: f64 = (0..3).map(|i| -log_softmax(logits.row(i))[targets[i] as usize]).sum::<f64>() / 3.0;
        assert!((all.loss - manual).abs() < 1e-12);
        let one = ignore_only_loss(&logits, &targets, &[true, false, true], &[true; 3]).unwrap();
        assert!((one.loss + log_softmax(logits.row(1))[0]).abs() < 1e-12);
        assert_eq!(one.normalizer, 1);
        assert_eq!(ignore_only_loss(&logits, &targets, &[true; 3], &[true; 3]), Err(ObjectiveError::EmptyMean));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let logits = LogitSlab::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            loss_with_masks(&logits, &[0], &mask(vec![false; 2], vec![false; 2]), &[true; 2], 1),
            Err(ObjectiveError::Shape { .. })
        ));
    }

    fn random_instance(
        seed: u64,
        positions: usize,
        vocab: usize,
    ) -> (LogitSlab, Vec<u32>, Vec<bool>, Vec<bool>, Vec<bool>, u32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(0..vocab) as u32;
        let data = (0..positions * vocab).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
        let targets = (0..positions)
            .map(|_| loop {
                let t = rng.gen_range(0..vocab) as u32;
                if t != c {
                    break t;
                }
            })
            .collect();
        let call: Vec<bool> = (0..positions).map(|_| rng.gen_bool(0.3)).collect();
        let ignore = (0..positions).map(|i| !call[i] && rng.gen_bool(0.3)).collect();
        let mut valid: Vec<bool> = (0..positions).map(|_| rng.gen_bool(0.9)).collect();
        valid[0] = true;
        (LogitSlab::new(positions, vocab, data).unwrap(), targets, call, ignore, valid, c)
    }

    #[test]
    fn combined_loss_matches_term_by_term_oracle() {
        for seed in 0..200 {
            let (logits, targets, call, ignore, valid, c) = random_instance(seed, 4, 6);
            let out = loss_with_mask_bits(&logits, &targets, &call, &ignore, &valid, c).unwrap();
            let expect = oracle_loss(&logits, &targets, &call, &ignore, &valid, c as usize);
            assert!((out.loss - expect).abs() <= 1e-9 * expect.abs().max(1.0), "seed {seed}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_and_masks_ignored_rows() {
        for seed in 0..20 {
            let (logits, targets, call, ignore, valid, c) = random_instance(seed, 4, 6);
            let out = loss_with_mask_bits(&logits, &targets, &call, &ignore, &valid, c).unwrap();
            let f = |data: &[f32]| {
                let l = LogitSlab { data: data.to_vec(), ..logits.clone() };
                oracle_loss(&l, &targets, &call, &ignore, &valid, c as usize)
            };
            let h = 1e-3f32;
            for k in 0..logits.data.len() {
                let mut plus = logits.data.clone();
                let mut minus = logits.data.clone();
                plus[k] += h;
                minus[k] -= h;
                let num = (f(&plus) - f(&minus)) / (plus[k] as f64 - minus[k] as f64);
                let ana = out.grad[k] as f64;
                assert!(
                    (num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-2),
                    "seed {seed} k {k}: {num} vs {ana}"
                );
            }
            for i in 0..4 {
                if (ignore[i] && !call[i]) || !valid[i] {
                    assert!(out.grad[i * 6..(i + 1) * 6].iter().all(|g| *g == 0.0));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in any::<u64>(), rot in 0usize..5) {
            let (logits, targets, call, ignore, valid, c) = random_instance(seed, 5, 4);
            let a = loss_with_mask_bits(&logits, &targets, &call, &ignore, &valid, c).unwrap().loss;
            let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
            let data: Vec<f32> = perm.iter().flat_map(|&i| logits.row(i).to_vec()).collect();
            let pick = |v: &[bool]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let tp: Vec<u32> = perm.iter().map(|&i| targets[i]).collect();
            let b = loss_with_mask_bits(&LogitSlab::new(5, 4, data).unwrap(), &tp, &pick(&call), &pick(&ignore), &pick(&valid), c).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn renormalized_rows_sum_to_one(row in proptest::collection::vec(-20.0f32..20.0, 2..16), c in 0usize..16) {
            let c = c % row.len();
            let lp = log_softmax_excluding(&row, c, 0).unwrap();
            let s: f64 = lp.iter().map(|l| l.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert_eq!(lp[c].exp(), 0.0);
        }
    }
}
