//! Signal conditioning for edge scoring: per-cell exponential reward smoothing
//! and online standardization of heterogeneous quantities onto a shared (0,1)
//! scale.
//!
//! Raw rewards, value differences, and pickup distances live on wildly
//! different scales that also drift over the day. Each signal is tracked by an
//! exponential moving mean and variance and squashed through a sigmoid of its
//! z-score, which makes downstream mixing weights portable across cities and
//! fare scales.

use serde::{Deserialize, Serialize};

use crate::domain::GridCell;
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-cell exponential moving average of order prices.
///
/// By default the first observation in a cell is adopted as-is, so sparse
/// cells do not spend a long time recovering from a zero initialization. With
/// `strict_cold_start` the update blends with the zero initial state like any
/// other step.
#[derive(Debug, Clone)]
pub struct RewardSmoother {
    beta: f64,
    strict_cold_start: bool,
    values: Vec<f64>,
    seen: Vec<bool>,
}

impl RewardSmoother {
    pub fn new(beta: f64, cell_count: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("smoother beta must lie in [0, 1]"));
        }
        Ok(RewardSmoother {
            beta,
            strict_cold_start: false,
            values: vec![0.0; cell_count],
            seen: vec![false; cell_count],
        })
    }

    pub fn with_strict_cold_start(mut self, strict: bool) -> Self {
        self.strict_cold_start = strict;
        self
    }

    /// Fold one observed price into the cell's running average:
    /// `S <- beta * S + (1 - beta) * price`.
    pub fn update(&mut self, cell: GridCell, price: f64) -> Result<()> {
        if !(price.is_finite() && price >= 0.0) {
            return Err(Error::runtime(format!("smoother rejects negative price {price}")));
        }
        let i = cell.index();
        if !self.seen[i] && !self.strict_cold_start {
            self.values[i] = price;
        } else {
            self.values[i] = self.beta * self.values[i] + (1.0 - self.beta) * price;
        }
        self.seen[i] = true;
        Ok(())
    }

    pub fn value(&self, cell: GridCell) -> f64 {
        self.values[cell.index()]
    }
}

/// Online mean/variance tracker that maps a raw signal onto (0,1) via a
/// sigmoid of its z-score.
///
/// The mean uses a slower decay than the variance so the squashing adapts to
/// spread changes faster than to level changes. The variance update uses the
/// freshly updated mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    m: f64,
    v: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    samples: u64,
}

pub const STANDARDIZER_MEAN_DECAY: f64 = 0.99;
pub const STANDARDIZER_VAR_DECAY: f64 = 0.999;
pub const STANDARDIZER_EPSILON: f64 = 1e-9;

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer::new(STANDARDIZER_MEAN_DECAY, STANDARDIZER_VAR_DECAY, STANDARDIZER_EPSILON)
            .unwrap()
    }
}

impl Standardizer {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta1) || !(0.0..=1.0).contains(&beta2) {
            return Err(Error::config("standardizer decay factors must lie in [0, 1]"));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::config("standardizer epsilon must be positive"));
        }
        Ok(Standardizer { m: 0.0, v: 0.0, beta1, beta2, epsilon, samples: 0 })
    }

    /// Fold one observation into the running mean and variance. The mean moves
    /// first; the variance measures spread around the new mean.
    pub fn update(&mut self, x: f64) {
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * x;
        let d = x - self.m;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * d * d;
        self.samples += 1;
    }

    /// Squash `x` by its z-score under the current statistics. Monotone
    /// increasing in `x`; returns exactly 0.5 at the running mean.
    ///
    /// Epsilon floors the denominator instead of adding to it: scaling every
    /// observation by a power of two then scales m and v exactly, so the
    /// z-score and the squashed output are bit-identical whenever the spread
    /// is above the floor. An additive guard would leak the scale into the
    /// output.
    pub fn standardize(&self, x: f64) -> f64 {
        sigmoid((x - self.m) / self.v.sqrt().max(self.epsilon))
    }

    pub fn mean(&self) -> f64 {
        self.m
    }

    pub fn variance(&self) -> f64 {
        self.v
    }

    pub fn sample_count(&self) -> u64 {
        self.samples
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Grid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cell0() -> GridCell {
        Grid::new(1, 1, 500.0).unwrap().cell(0, 0)
    }

    #[test]
    fn smoother_beta_zero_adopts_latest_price() {
        let mut s = RewardSmoother::new(0.0, 1).unwrap().with_strict_cold_start(true);
        s.update(cell0(), 4.0).unwrap();
        s.update(cell0(), 10.0).unwrap();
        assert_eq!(s.value(cell0()), 10.0);
    }

    #[test]
    fn smoother_beta_one_freezes_state() {
        let mut s = RewardSmoother::new(1.0, 1).unwrap();
        s.update(cell0(), 5.0).unwrap();
        s.update(cell0(), 100.0).unwrap();
        assert_eq!(s.value(cell0()), 5.0);
    }

    #[test]
    fn smoother_strict_cold_start_blends_with_zero() {
        let mut s = RewardSmoother::new(0.9, 1).unwrap().with_strict_cold_start(true);
        s.update(cell0(), 10.0).unwrap();
        assert_abs_diff_eq!(s.value(cell0()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn smoother_default_adopts_first_observation() {
        let mut s = RewardSmoother::new(0.9, 1).unwrap();
        s.update(cell0(), 10.0).unwrap();
        assert_eq!(s.value(cell0()), 10.0);
        s.update(cell0(), 20.0).unwrap();
        assert_abs_diff_eq!(s.value(cell0()), 11.0, epsilon = 1e-12);
    }

    #[test]
    fn smoother_rejects_negative_price() {
        let mut s = RewardSmoother::new(0.9, 1).unwrap();
        assert!(s.update(cell0(), -1.0).is_err());
        assert!(s.update(cell0(), f64::NAN).is_err());
    }

    #[test]
    fn smoother_cells_are_independent() {
        let g = Grid::new(1, 2, 500.0).unwrap();
        let mut s = RewardSmoother::new(0.5, 2).unwrap();
        s.update(g.cell(0, 0), 8.0).unwrap();
        assert_eq!(s.value(g.cell(0, 1)), 0.0);
        assert_eq!(s.value(g.cell(0, 0)), 8.0);
    }

    #[test]
    fn standardizer_single_update_statistics() {
        // From zero state with mean decay 0.9 and variance decay 0.99, one
        // observation of 10 gives m = 1.0 and v = 0.99*0 + 0.01*(10-1)^2 = 0.81.
        let mut s = Standardizer::new(0.9, 0.99, 1e-9).unwrap();
        s.update(10.0);
        assert_abs_diff_eq!(s.mean(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.variance(), 0.81, epsilon = 1e-12);
    }

    #[test]
    fn standardize_is_half_at_the_mean() {
        let mut s = Standardizer::default();
        for x in [3.0, 5.0, 4.0, 6.0] {
            s.update(x);
        }
        assert_abs_diff_eq!(s.standardize(s.mean()), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn standardize_one_sigma_points() {
        let mut s = Standardizer::new(0.9, 0.99, 1e-9).unwrap();
        for x in [2.0, 7.0, 3.0, 9.0, 4.0] {
            s.update(x);
        }
        let sd = s.variance().sqrt();
        // One standard deviation maps to sigmoid(±1) up to the epsilon guard.
        assert_abs_diff_eq!(s.standardize(s.mean() + sd), 0.731058578630, epsilon = 1e-6);
        assert_abs_diff_eq!(s.standardize(s.mean() - sd), 0.268941421369, epsilon = 1e-6);
    }

    #[test]
    fn standardizer_scale_invariance_exact_for_powers_of_two() {
        for k in [2.0_f64, 0.5] {
            let mut a = Standardizer::default();
            let mut b = Standardizer::default();
            let xs = [4.0, 9.5, 1.25, 7.0, 3.5, 8.25, 2.0, 6.5];
            for &x in &xs {
                a.update(x);
                b.update(k * x);
            }
            // Powers of two scale every floating-point operation exactly, so
            // state and output are bit-identical.
            assert_eq!(b.mean(), k * a.mean());
            assert_eq!(b.variance(), k * k * a.variance());
            for &x in &xs {
                assert_eq!(b.standardize(k * x).to_bits(), a.standardize(x).to_bits());
            }
        }
    }

    #[test]
    fn standardizer_scale_invariance_approximate_for_any_scale() {
        for k in [3.0_f64, 0.1, 17.25] {
            let mut a = Standardizer::default();
            let mut b = Standardizer::default();
            let xs: Vec<f64> = (0..200).map(|i| 2.0 + ((i * 37) % 100) as f64 / 10.0).collect();
            for &x in &xs {
                a.update(x);
                b.update(k * x);
            }
            for &x in &xs {
                assert_abs_diff_eq!(b.standardize(k * x), a.standardize(x), epsilon = 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn standardize_stays_in_unit_interval(
            xs in prop::collection::vec(-1e6_f64..1e6, 1..50),
            probe in -1e6_f64..1e6,
        ) {
            let mut s = Standardizer::default();
            for &x in &xs {
                s.update(x);
            }
            let y = s.standardize(probe);
            prop_assert!((0.0..=1.0).contains(&y));
            // Within the resolvable z-score range the bound is strict.
            let z = (probe - s.mean()) / s.variance().sqrt().max(1e-9);
            if z.abs() < 30.0 {
                prop_assert!(y > 0.0 && y < 1.0);
            }
        }

        #[test]
        fn standardize_is_monotone(
            xs in prop::collection::vec(-1e4_f64..1e4, 1..50),
            lo in -1e4_f64..1e4,
            gap in 1e-6_f64..1e4,
        ) {
            let mut s = Standardizer::default();
            for &x in &xs {
                s.update(x);
            }
            prop_assert!(s.standardize(lo) <= s.standardize(lo + gap));
        }
    }
}
