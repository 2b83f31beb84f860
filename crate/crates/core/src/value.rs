//! Spatial value table and its online temporal-difference updates.
//!
//! Each grid cell carries a scalar estimate of future driver earnings. Updates
//! arrive as dispatch samples (driver cell, order destination, smoothed reward,
//! completion probability) or idle samples (stay in place, zero reward). The
//! update target takes the expectation over the rider's accept/cancel outcome
//! before the transition is known, so learning happens at decision time rather
//! than at trip completion.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{Grid, GridCell};
use crate::error::{Error, Result};

/// Discount factor constrained to `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Discount(f64);

impl Discount {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && (0.0..1.0).contains(&gamma)) {
            return Err(Error::config(format!("discount factor must lie in [0, 1), got {gamma}")));
        }
        Ok(Discount(gamma))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Flat per-cell table of value estimates, indexed by cell id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(cell_count: usize) -> Self {
        ValueTable { values: vec![0.0; cell_count] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        ValueTable { values }
    }

    pub fn get(&self, cell: GridCell) -> f64 {
        self.values[cell.index()]
    }

    pub fn set(&mut self, cell: GridCell, v: f64) {
        self.values[cell.index()] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn reset(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Write `cell_id,row,col,value` rows. Values use the shortest
    /// representation that parses back to the identical float.
    pub fn write_csv<W: Write>(&self, grid: &Grid, w: &mut W) -> Result<()> {
        if self.values.len() != grid.cell_count() {
            return Err(Error::runtime("value table size does not match grid"));
        }
        writeln!(w, "cell_id,row,col,value")?;
        for (i, v) in self.values.iter().enumerate() {
            let cell = grid.cell_from_id(i as u32);
            writeln!(w, "{},{},{},{}", cell.id, cell.row, cell.col, v)?;
        }
        Ok(())
    }

    /// Parse a table written by [`write_csv`](Self::write_csv), checking that
    /// every cell of `grid` appears exactly once, in id order.
    pub fn read_csv<R: BufRead>(grid: &Grid, r: R) -> Result<ValueTable> {
        let mut values = vec![0.0; grid.cell_count()];
        let mut lines = r.lines();
        match lines.next() {
            Some(header) => {
                let header = header?;
                if header.trim() != "cell_id,row,col,value" {
                    return Err(Error::config(format!("unexpected value table header: {header}")));
                }
            }
            None => return Err(Error::config("empty value table file")),
        }
        let mut expected: u32 = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.trim().split(',').collect();
            if parts.len() != 4 {
                return Err(Error::config(format!("malformed value table row: {line}")));
            }
            let id: u32 = parts[0]
                .parse()
                .map_err(|_| Error::config(format!("bad cell id in row: {line}")))?;
            if id != expected {
                return Err(Error::config(format!("value table rows out of order at id {id}")));
            }
            let cell = grid.cell_from_id(id);
            let row: u16 = parts[1].parse().map_err(|_| Error::config("bad row index"))?;
            let col: u16 = parts[2].parse().map_err(|_| Error::config("bad col index"))?;
            if row != cell.row || col != cell.col {
                return Err(Error::config(format!("row/col mismatch for cell {id}")));
            }
            values[id as usize] = parts[3]
                .parse()
                .map_err(|_| Error::config(format!("bad value in row: {line}")))?;
            expected += 1;
        }
        if expected as usize != grid.cell_count() {
            return Err(Error::config(format!(
                "value table covers {expected} of {} cells",
                grid.cell_count()
            )));
        }
        Ok(ValueTable { values })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Dispatch,
    Idle,
}

/// One learning transition. Idle samples keep the driver in place with zero
/// reward; dispatch samples move value mass from the driver's cell toward the
/// order destination in expectation over the completion outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchSample {
    pub kind: SampleKind,
    /// Cell the driver occupies when the decision is made.
    pub driver_cell: GridCell,
    /// Cell the driver ends up in if the trip completes.
    pub destination: GridCell,
    pub reward: f64,
    pub completion_prob: f64,
}

impl DispatchSample {
    pub fn dispatch(
        driver_cell: GridCell,
        destination: GridCell,
        reward: f64,
        completion_prob: f64,
    ) -> Self {
        DispatchSample { kind: SampleKind::Dispatch, driver_cell, destination, reward, completion_prob }
    }

    pub fn idle(cell: GridCell) -> Self {
        DispatchSample {
            kind: SampleKind::Idle,
            driver_cell: cell,
            destination: cell,
            reward: 0.0,
            completion_prob: 1.0,
        }
    }
}

/// Expected one-step return of a sample before the accept/cancel outcome is
/// known: with probability `p_c` the trip happens (reward plus discounted
/// destination value), otherwise the driver stays and keeps the discounted
/// value of the current cell. Idle samples reduce to `gamma * V[cell]`.
pub fn expected_td_target(sample: &DispatchSample, v: &ValueTable, gamma: Discount) -> f64 {
    let g = gamma.get();
    let p = sample.completion_prob;
    p * (sample.reward + g * v.get(sample.destination)) + (1.0 - p) * g * v.get(sample.driver_cell)
}

/// Temporal-difference error of `sample` against the current table.
pub fn td_delta(sample: &DispatchSample, v: &ValueTable, gamma: Discount) -> f64 {
    expected_td_target(sample, v, gamma) - v.get(sample.driver_cell)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { base_lr: 0.05, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("adam base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam decay factors must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("adam epsilon must be positive"));
        }
        Ok(())
    }
}

/// Per-cell first and second moment accumulators with per-cell step counts for
/// bias correction. Cells update independently: a busy downtown cell does not
/// shrink the effective step size of a rarely visited suburb.
#[derive(Debug, Clone)]
pub struct AdamState {
    params: AdamParams,
    m1: Vec<f64>,
    m2: Vec<f64>,
    steps: Vec<u32>,
}

impl AdamState {
    pub fn new(params: AdamParams, cell_count: usize) -> Self {
        AdamState { params, m1: vec![0.0; cell_count], m2: vec![0.0; cell_count], steps: vec![0; cell_count] }
    }

    pub fn params(&self) -> &AdamParams {
        &self.params
    }

    pub fn step_count(&self, cell: GridCell) -> u32 {
        self.steps[cell.index()]
    }

    pub fn reset(&mut self) {
        self.m1.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
        self.steps.iter_mut().for_each(|v| *v = 0);
    }
}

/// Apply one bias-corrected moment update to `cell`, moving the value in the
/// direction of `delta`.
///
/// Epsilon floors the denominator rather than adding to it, so scaling every
/// delta by a power of two scales the value trajectory exactly (both moments
/// scale exactly and the flooring is inert above the guard level). Values
/// learned from scaled rewards are then exact multiples, which keeps
/// standardized edge scores identical across price scales.
pub fn adam_apply(table: &mut ValueTable, adam: &mut AdamState, cell: GridCell, delta: f64) {
    let i = cell.index();
    let p = &adam.params;
    adam.steps[i] += 1;
    adam.m1[i] = p.beta1 * adam.m1[i] + (1.0 - p.beta1) * delta;
    adam.m2[i] = p.beta2 * adam.m2[i] + (1.0 - p.beta2) * delta * delta;
    let bc1 = 1.0 - p.beta1.powi(adam.steps[i] as i32);
    let bc2 = 1.0 - p.beta2.powi(adam.steps[i] as i32);
    let mh = adam.m1[i] / bc1;
    let vh = adam.m2[i] / bc2;
    let next = table.get(cell) + p.base_lr * mh / vh.sqrt().max(p.epsilon);
    table.set(cell, next);
}

/// Which optimizer moves the table toward the TD target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UpdateRule {
    Adam(AdamParams),
    /// Plain stochastic update `V[cell] += alpha * delta` with a constant step.
    Sgd { alpha: f64 },
}

impl UpdateRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            UpdateRule::Adam(p) => p.validate(),
            UpdateRule::Sgd { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0 && *alpha <= 1.0) {
                    return Err(Error::config("sgd alpha must lie in (0, 1]"));
                }
                Ok(())
            }
        }
    }
}

enum RuleState {
    Adam(AdamState),
    Sgd { alpha: f64 },
}

/// Value table bundled with its optimizer state and discount factor.
pub struct ValueStore {
    pub table: ValueTable,
    gamma: Discount,
    rule: RuleState,
}

impl ValueStore {
    pub fn new(cell_count: usize, gamma: Discount, rule: UpdateRule) -> Result<Self> {
        rule.validate()?;
        let rule = match rule {
            UpdateRule::Adam(p) => RuleState::Adam(AdamState::new(p, cell_count)),
            UpdateRule::Sgd { alpha } => RuleState::Sgd { alpha },
        };
        Ok(ValueStore { table: ValueTable::zeros(cell_count), gamma, rule })
    }

    pub fn gamma(&self) -> Discount {
        self.gamma
    }

    /// Compute the sample's TD error against the current table and apply one
    /// optimizer step to the driver's cell. Returns the error.
    pub fn apply_sample(&mut self, sample: &DispatchSample) -> f64 {
        let delta = td_delta(sample, &self.table, self.gamma);
        match &mut self.rule {
            RuleState::Adam(state) => adam_apply(&mut self.table, state, sample.driver_cell, delta),
            RuleState::Sgd { alpha } => {
                let next = self.table.get(sample.driver_cell) + *alpha * delta;
                self.table.set(sample.driver_cell, next);
            }
        }
        delta
    }

    /// Apply a batch in order. The table mutates between items, matching the
    /// online single-pass semantics of the decision loop.
    pub fn batch_update(&mut self, samples: &[DispatchSample]) {
        for s in samples {
            self.apply_sample(s);
        }
    }

    pub fn reset(&mut self) {
        self.table.reset();
        if let RuleState::Adam(state) = &mut self.rule {
            state.reset();
        }
    }
}
