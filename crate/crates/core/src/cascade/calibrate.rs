//! Running-quantile threshold on the `<CALL>` logit.
//!
//! The threshold is the empirical `1 - r'` quantile of the last `window` call logits, where
//! `r' = clamp(target + (target * emitted - calls) / window, 0, 1)` nudges the rate up after
//! a deficit of calls and down after a surplus. A call fires when the current logit is at
//! least the threshold.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Threshold for the next decision; `+inf` means never call.
pub fn calibrate_threshold(history: &[f32], target_ratio: f64, calls: u64, emitted: u64, window: usize) -> f64 {
    if history.is_empty() || target_ratio <= 0.0 {
        return f64::INFINITY;
    }
    let window = window.max(1) as f64;
    let adjusted = (target_ratio + (target_ratio * emitted as f64 - calls as f64) / window).clamp(0.0, 1.0);
    if adjusted <= 0.0 {
        return f64::INFINITY;
    }
    let mut sorted: Vec<f32> = history.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let idx = (((1.0 - adjusted) * n as f64).floor() as usize).min(n - 1);
    sorted[idx] as f64
}

/// Calibrator state; persists across generation sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCalibrator {
    pub target_ratio: f64,
    pub window: usize,
    /// No calls until this many logits have been observed.
    pub warmup: usize,
    history: VecDeque<f32>,
    calls: u64,
    emitted: u64,
}

impl CallCalibrator {
    pub fn new(target_ratio: f64, window: usize, warmup: usize) -> Self {
        CallCalibrator { target_ratio, window: window.max(1), warmup, history: VecDeque::new(), calls: 0, emitted: 0 }
    }

    pub fn threshold(&self) -> f64 {
        if self.history.len() < self.warmup.max(1) {
            return f64::INFINITY;
        }
        let history: Vec<f32> = self.history.iter().copied().collect();
        calibrate_threshold(&history, self.target_ratio, self.calls, self.emitted, self.window)
    }

    /// Records one decision step.
    pub fn record(&mut self, call_logit: f32, called: bool) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back(call_logit);
        self.emitted += 1;
        self.calls += called as u64;
    }

    /// Decides and records in one step.
    pub fn decide(&mut self, call_logit: f32) -> bool {
        let call = call_logit as f64 >= self.threshold();
        self.record(call_logit, call);
        call
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn realized_ratio(&self) -> f64 {
        if self.emitted == 0 {
            0.0
        } else {
            self.calls as f64 / self.emitted as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Standard normal samples via Box-Muller.
    fn normal_stream(seed: u64, n: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
            })
            .collect()
    }

    #[test]
    fn empty_history_never_calls() {
        assert_eq!(calibrate_threshold(&[], 0.15, 0, 0, 512), f64::INFINITY);
    }

    #[test]
    fn zero_target_never_calls() {
        let mut c = CallCalibrator::new(0.0, 64, 1);
        assert!(normal_stream(1, 2000).into_iter().all(|l| !c.decide(l)));
    }

    #[test]
    fn quantile_without_adjustment() {
        let history: Vec<f32> = (0..100).map(|i| i as f32).collect();
        // emitted * target == calls: r' = target, so the 85th value in sorted order.
        assert_eq!(calibrate_threshold(&history, 0.15, 15, 100, 100), 85.0);
        // A deficit of 10 calls over a window of 100 raises the rate to 0.25.
        assert_eq!(calibrate_threshold(&history, 0.15, 5, 100, 100), 75.0);
        // A large surplus drives r' to 0.
        assert_eq!(calibrate_threshold(&history, 0.15, 100, 100, 100), f64::INFINITY);
    }

    #[test]
    fn stationary_stream_tracks_target() {
        for seed in 0..5 {
            let mut c = CallCalibrator::new(0.15, 512, 32);
            for l in normal_stream(seed, 10_000) {
                c.decide(l);
            }
            assert!((c.realized_ratio() - 0.15).abs() <= 0.02, "seed {seed}: {}", c.realized_ratio());
        }
    }

    #[test]
    fn running_ratio_stays_within_budget_guard() {
        let mut c = CallCalibrator::new(0.15, 512, 32);
        for (i, l) in normal_stream(9, 10_000).into_iter().enumerate() {
            c.decide(l);
            if i >= 500 {
                assert!(c.realized_ratio() <= 0.30);
            }
        }
    }
}
