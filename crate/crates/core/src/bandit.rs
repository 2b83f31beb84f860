//! Memory-limited UCB bandit that adapts the completion-probability pruning
//! threshold online.
//!
//! Each arm is one candidate threshold. Every feedback interval the bandit
//! observes the marketplace's recent completion and answer rates, folds them
//! into the current arm's quality estimate with an exponential blend, decays
//! all visit counts, and picks the next arm by a UCB score. The decay keeps
//! the total count bounded, so the exploration bonus never vanishes and the
//! bandit keeps tracking a drifting optimum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evenly spaced values from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| {
            if i == n - 1 {
                end
            } else {
                start + (end - start) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Scalar quality of one feedback window: completion rate with a small answer
/// rate tiebreaker.
pub fn objective(cr: f64, ar: f64) -> f64 {
    cr + 0.1 * ar
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmUcbConfig {
    /// Candidate thresholds; each must lie in [0, 1].
    pub arms: Vec<f64>,
    /// Blend factor for arm quality: weight kept by the old estimate.
    pub alpha_q: f64,
    /// Per-feedback decay applied to all visit counts.
    pub gamma_n: f64,
    /// Exploration coefficient.
    pub c: f64,
}

impl Default for LmUcbConfig {
    fn default() -> Self {
        LmUcbConfig { arms: linspace(0.0, 0.3, 41), alpha_q: 0.8, gamma_n: 0.99, c: 0.05 }
    }
}

impl LmUcbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(Error::config("bandit needs at least one arm"));
        }
        if self.arms.iter().any(|a| !(a.is_finite() && (0.0..=1.0).contains(a))) {
            return Err(Error::config("bandit arms must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.alpha_q) {
            return Err(Error::config("bandit alpha_q must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gamma_n) {
            return Err(Error::config("bandit gamma_n must lie in [0, 1]"));
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::config("bandit exploration coefficient must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LmUcbState {
    cfg: LmUcbConfig,
    q: Vec<f64>,
    n_arm: Vec<f64>,
    n_total: f64,
    current: usize,
}

impl LmUcbState {
    /// Start with zeroed statistics on a uniformly random initial arm.
    pub fn new(cfg: LmUcbConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.arms.len();
        let current = rng.random_range(0..k);
        Ok(LmUcbState { cfg, q: vec![0.0; k], n_arm: vec![0.0; k], n_total: 0.0, current })
    }

    pub fn threshold(&self) -> f64 {
        self.cfg.arms[self.current]
    }

    pub fn current_arm(&self) -> usize {
        self.current
    }

    pub fn arm_count(&self) -> usize {
        self.cfg.arms.len()
    }

    pub fn quality(&self, arm: usize) -> f64 {
        self.q[arm]
    }

    /// Fold one window's rates into the current arm and move to the arm with
    /// the best optimistic score. Returns the newly selected threshold.
    pub fn feedback(&mut self, cr: f64, ar: f64) -> Result<f64> {
        for (name, x) in [("completion rate", cr), ("answer rate", ar)] {
            if !(x.is_finite() && (0.0..=1.0).contains(&x)) {
                return Err(Error::runtime(format!("bandit feedback {name} {x} outside [0, 1]")));
            }
        }
        self.n_total = self.cfg.gamma_n * self.n_total + 1.0;
        for n in &mut self.n_arm {
            *n *= self.cfg.gamma_n;
        }
        let q_obs = objective(cr, ar);
        self.q[self.current] =
            self.cfg.alpha_q * self.q[self.current] + (1.0 - self.cfg.alpha_q) * q_obs;
        self.n_arm[self.current] += 1.0;
        self.current = self.select();
        Ok(self.threshold())
    }

    /// Argmax of `Q[a] + c * sqrt(ln(max(n, 1)) / N[a])`. Unvisited arms have
    /// an infinite bonus; ties resolve to the lowest index.
    fn select(&self) -> usize {
        let ln_n = self.n_total.max(1.0).ln();
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for a in 0..self.q.len() {
            let score = if self.n_arm[a] <= 0.0 {
                f64::INFINITY
            } else {
                self.q[a] + self.cfg.c * (ln_n / self.n_arm[a]).sqrt()
            };
            if score > best_score {
                best_score = score;
                best = a;
            }
        }
        best
    }
}

/// Settled-request counters for one metrics window.
///
/// A request is counted when its outcome settles (completes, cancels, or
/// expires), not when it arrives, so `completed <= accepted <= requests` holds
/// exactly within every window. In this engine every dispatched order counts
/// as accepted, so `accepted` and `dispatches` coincide.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsWindow {
    pub window_start: u64,
    pub window_len: u64,
    pub requests: u64,
    pub accepted: u64,
    pub completed: u64,
    pub dispatches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRates {
    pub cr: f64,
    pub ar: f64,
    pub sr: f64,
}

impl MetricsWindow {
    pub fn new(window_start: u64, window_len: u64) -> Self {
        MetricsWindow { window_start, window_len, ..Default::default() }
    }

    /// Count one settled request. `dispatched` marks requests that had been
    /// assigned a driver; `completed` marks trips that finished.
    pub fn record_settled(&mut self, dispatched: bool, completed: bool) {
        debug_assert!(dispatched || !completed, "a completed request must have been dispatched");
        self.requests += 1;
        if dispatched {
            self.accepted += 1;
            self.dispatches += 1;
        }
        if completed {
            self.completed += 1;
        }
    }

    /// Completion, answer, and success rates. Empty denominators yield 0.
    pub fn rates(&self) -> WindowRates {
        let div = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        WindowRates {
            cr: div(self.completed, self.requests),
            ar: div(self.accepted, self.requests),
            sr: div(self.completed, self.dispatches),
        }
    }

    pub fn reset(&mut self, window_start: u64) {
        *self = MetricsWindow::new(window_start, self.window_len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(cfg: LmUcbConfig) -> LmUcbState {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        LmUcbState::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn linspace_endpoints_and_count() {
        let arms = linspace(0.0, 0.3, 41);
        assert_eq!(arms.len(), 41);
        assert_eq!(arms[0], 0.0);
        assert_eq!(arms[40], 0.3);
        assert_abs_diff_eq!(arms[1], 0.0075, epsilon = 1e-15);
        assert!(arms.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn objective_frozen_example() {
        assert_abs_diff_eq!(objective(0.7, 0.8), 0.78, epsilon = 1e-12);
    }

    #[test]
    fn quality_blend_frozen_example() {
        let cfg = LmUcbConfig { arms: vec![0.0, 0.1], alpha_q: 0.8, gamma_n: 1.0, c: 0.0 };
        let mut s = state(cfg);
        let arm = s.current_arm();
        s.q[arm] = 0.4;
        // Observation q = 0.6 (cr 0.6, ar 0) blends to 0.8*0.4 + 0.2*0.6.
        s.feedback(0.6, 0.0).unwrap();
        assert_abs_diff_eq!(s.quality(arm), 0.44, epsilon = 1e-12);
    }

    #[test]
    fn unvisited_arms_are_tried_first() {
        let cfg = LmUcbConfig { arms: linspace(0.0, 0.3, 5), ..LmUcbConfig::default() };
        let mut s = state(cfg);
        let first = s.current_arm();
        let mut seen = vec![first];
        for _ in 0..4 {
            s.feedback(0.5, 0.5).unwrap();
            seen.push(s.current_arm());
        }
        seen.sort_unstable();
        // After five feedbacks every arm has been visited exactly once.
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn count_decay_follows_recurrence() {
        let cfg =
            LmUcbConfig { arms: vec![0.0, 0.1], alpha_q: 0.5, gamma_n: 0.9, c: 0.0 };
        let mut s = state(cfg);
        s.feedback(0.5, 0.0).unwrap();
        assert_abs_diff_eq!(s.n_total, 1.0, epsilon = 1e-12);
        s.feedback(0.5, 0.0).unwrap();
        assert_abs_diff_eq!(s.n_total, 1.9, epsilon = 1e-12);
        s.feedback(0.5, 0.0).unwrap();
        assert_abs_diff_eq!(s.n_total, 0.9 * 1.9 + 1.0, epsilon = 1e-12);
    }

    #[test]
    fn select_breaks_ties_at_lowest_index() {
        let cfg = LmUcbConfig { arms: vec![0.0, 0.1, 0.2], alpha_q: 0.0, gamma_n: 1.0, c: 0.0 };
        let mut s = state(cfg);
        s.q = vec![0.5, 0.5, 0.5];
        s.n_arm = vec![1.0, 1.0, 1.0];
        s.n_total = 3.0;
        s.current = 2;
        s.feedback(0.5, 0.0).unwrap();
        assert_eq!(s.current_arm(), 0);
    }

    #[test]
    fn feedback_rejects_out_of_range_rates() {
        let mut s = state(LmUcbConfig::default());
        assert!(s.feedback(1.2, 0.0).is_err());
        assert!(s.feedback(0.5, -0.1).is_err());
        assert!(s.feedback(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn bandit_concentrates_on_better_arm() {
        // Arm quality is simulated through the observed completion rate.
        let cfg = LmUcbConfig {
            arms: vec![0.0, 0.1, 0.2],
            alpha_q: 0.8,
            gamma_n: 0.99,
            c: 0.05,
        };
        let mut s = state(cfg);
        let payoff = [0.30, 0.55, 0.40];
        let mut pulls = [0usize; 3];
        for _ in 0..400 {
            let arm = s.current_arm();
            pulls[arm] += 1;
            s.feedback(payoff[arm], 0.0).unwrap();
        }
        assert!(pulls[1] > pulls[0] + pulls[2], "pulls: {pulls:?}");
    }

    #[test]
    fn initial_arm_depends_on_seed() {
        let cfg = LmUcbConfig::default();
        let picks: Vec<usize> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                LmUcbState::new(cfg.clone(), &mut rng).unwrap().current_arm()
            })
            .collect();
        assert!(picks.iter().any(|&p| p != picks[0]));
    }

    #[test]
    fn metrics_window_rates_and_ordering() {
        let mut w = MetricsWindow::new(0, 60);
        w.record_settled(true, true);
        w.record_settled(true, false);
        w.record_settled(false, false);
        assert_eq!((w.requests, w.accepted, w.completed), (3, 2, 1));
        assert!(w.completed <= w.accepted && w.accepted <= w.requests);
        let r = w.rates();
        assert_abs_diff_eq!(r.cr, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.ar, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.sr, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn empty_window_rates_are_zero() {
        let w = MetricsWindow::new(0, 60);
        let r = w.rates();
        assert_eq!((r.cr, r.ar, r.sr), (0.0, 0.0, 0.0));
    }
}
