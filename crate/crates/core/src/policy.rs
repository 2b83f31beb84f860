//! Dispatch policies: the learning engine and its baselines.
//!
//! All policies share one decision surface: given a market snapshot they pick
//! disjoint order-driver assignments. The learning policy additionally folds
//! finished rounds into its value table and conditioning state on a fixed
//! cadence, and adapts its pruning threshold from window feedback. Baselines
//! cover the classic comparison points: distance-greedy matching, an
//! unconditioned greedy-value learner, and a frozen pre-trained table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{LmUcbConfig, LmUcbState};
use crate::conditioning::{sigmoid, RewardSmoother, Standardizer};
use crate::domain::{Grid, GridCell, MarketSnapshot};
use crate::error::{Error, Result};
use crate::matching::{
    match_round, prune, raw_edge_utility, solve_assignment, EdgeWeights, MatchResult,
    StandardizerSet, WeightedEdge,
};
use crate::value::{AdamParams, Discount, UpdateRule, ValueStore, ValueTable};

/// Probability that a dispatched trip completes, as a function of pickup
/// distance: `sigmoid(a - b * km)`. Monotone non-increasing in distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionModel {
    pub a: f64,
    pub b_per_km: f64,
}

impl Default for CompletionModel {
    fn default() -> Self {
        CompletionModel { a: 2.0, b_per_km: 0.6 }
    }
}

impl CompletionModel {
    pub fn new(a: f64, b_per_km: f64) -> Result<Self> {
        let m = CompletionModel { a, b_per_km };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() || !(self.b_per_km.is_finite() && self.b_per_km >= 0.0) {
            return Err(Error::config("completion model needs finite a and non-negative b"));
        }
        Ok(())
    }

    pub fn completion_prob(&self, pickup_distance_m: f64) -> f64 {
        sigmoid(self.a - self.b_per_km * pickup_distance_m / 1000.0)
    }
}

/// Linear daily schedule for the edge mixing weights. Outside the active day
/// window the boundary values hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub w_rew_start: f64,
    pub w_rew_finish: f64,
    pub w_p_start: f64,
    pub w_p_finish: f64,
    pub day_start_s: u64,
    pub day_end_s: u64,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule {
            w_rew_start: 0.430,
            w_rew_finish: 0.008,
            w_p_start: 0.002,
            w_p_finish: 0.004,
            day_start_s: 0,
            day_end_s: 86_400,
        }
    }
}

impl WeightSchedule {
    pub fn validate(&self) -> Result<()> {
        EdgeWeights::new(self.w_rew_start, self.w_p_start)?;
        EdgeWeights::new(self.w_rew_finish, self.w_p_finish)?;
        if self.day_start_s >= self.day_end_s || self.day_end_s > 86_400 {
            return Err(Error::config("weight schedule day window must satisfy start < end <= 86400"));
        }
        Ok(())
    }
}

/// Edge weights at wall-clock second `t`, linearly interpolated across the
/// day window and repeating every day.
pub fn interpolate_weights(schedule: &WeightSchedule, t: u64) -> EdgeWeights {
    let t_day = (t % 86_400).clamp(schedule.day_start_s, schedule.day_end_s);
    let frac = (t_day - schedule.day_start_s) as f64
        / (schedule.day_end_s - schedule.day_start_s) as f64;
    let lerp = |a: f64, b: f64| a + (b - a) * frac;
    EdgeWeights::new(
        lerp(schedule.w_rew_start, schedule.w_rew_finish),
        lerp(schedule.w_p_start, schedule.w_p_finish),
    )
    .expect("interpolation of validated endpoints stays valid")
}

fn default_true() -> bool {
    true
}

fn default_gamma() -> f64 {
    0.9
}

/// Full configuration of the learning policy. Every knob has a production
/// default; tests and ablations switch the conditioning stages off
/// individually.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlwConfig {
    pub gamma: f64,
    pub w_rew_start: f64,
    pub w_rew_finish: f64,
    pub w_p_start: f64,
    pub w_p_finish: f64,
    pub day_start_s: u64,
    pub day_end_s: u64,
    /// Seconds between value/conditioning batch updates.
    pub update_interval_s: u64,
    /// Seconds between threshold adaptation steps.
    pub feedback_interval_s: u64,
    /// Squash edge signals through online standardization. When off, edges mix
    /// raw signals with the `raw_w_*` weights instead of the daily schedule.
    pub standardize: bool,
    /// Smooth per-cell rewards before they enter learning and scoring. When
    /// off, the order's raw price is used directly.
    pub smooth_rewards: bool,
    pub smoother_beta: f64,
    /// Blend the first observation of a cell with the zero initial state
    /// instead of adopting it.
    pub strict_cold_start: bool,
    pub std_mean_decay: f64,
    pub std_var_decay: f64,
    pub std_epsilon: f64,
    /// Adam optimizer parameters; ignored when `sgd_alpha` is set.
    pub adam: AdamParams,
    /// Use a plain constant-step update instead of Adam.
    pub sgd_alpha: Option<f64>,
    /// Adapt the pruning threshold online; otherwise `fixed_threshold` holds.
    pub adapt_threshold: bool,
    pub bandit: LmUcbConfig,
    pub fixed_threshold: f64,
    /// Raw-mode mixing weights, used only when `standardize` is off. The
    /// pickup penalty applies per kilometer.
    pub raw_w_rew: f64,
    pub raw_w_res: f64,
    pub raw_w_p: f64,
}

impl Default for RlwConfig {
    fn default() -> Self {
        RlwConfig {
            gamma: default_gamma(),
            w_rew_start: 0.430,
            w_rew_finish: 0.008,
            w_p_start: 0.002,
            w_p_finish: 0.004,
            day_start_s: 0,
            day_end_s: 86_400,
            update_interval_s: 10,
            feedback_interval_s: 60,
            standardize: default_true(),
            smooth_rewards: default_true(),
            smoother_beta: 0.9,
            strict_cold_start: false,
            std_mean_decay: 0.99,
            std_var_decay: 0.999,
            std_epsilon: 1e-9,
            adam: AdamParams::default(),
            sgd_alpha: None,
            adapt_threshold: default_true(),
            bandit: LmUcbConfig::default(),
            fixed_threshold: 0.0,
            raw_w_rew: 1.0,
            raw_w_res: 1.0,
            raw_w_p: 1.0,
        }
    }
}

impl RlwConfig {
    pub fn schedule(&self) -> WeightSchedule {
        WeightSchedule {
            w_rew_start: self.w_rew_start,
            w_rew_finish: self.w_rew_finish,
            w_p_start: self.w_p_start,
            w_p_finish: self.w_p_finish,
            day_start_s: self.day_start_s,
            day_end_s: self.day_end_s,
        }
    }

    pub fn update_rule(&self) -> UpdateRule {
        match self.sgd_alpha {
            Some(alpha) => UpdateRule::Sgd { alpha },
            None => UpdateRule::Adam(self.adam),
        }
    }

    pub fn validate(&self) -> Result<()> {
        Discount::new(self.gamma)?;
        self.schedule().validate()?;
        if self.update_interval_s == 0 || self.feedback_interval_s == 0 {
            return Err(Error::config("policy update and feedback intervals must be positive"));
        }
        if !(0.0..=1.0).contains(&self.smoother_beta) {
            return Err(Error::config("smoother_beta must lie in [0, 1]"));
        }
        Standardizer::new(self.std_mean_decay, self.std_var_decay, self.std_epsilon)?;
        self.update_rule().validate()?;
        if !(0.0..=1.0).contains(&self.fixed_threshold) {
            return Err(Error::config("fixed_threshold must lie in [0, 1]"));
        }
        if self.adapt_threshold {
            self.bandit.validate()?;
        }
        for (name, w) in
            [("raw_w_rew", self.raw_w_rew), ("raw_w_res", self.raw_w_res), ("raw_w_p", self.raw_w_p)]
        {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// One decided assignment, as indices into the snapshot's lists plus the
/// originating candidate pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecidedMatch {
    pub order_idx: usize,
    pub driver_idx: usize,
    pub pair_idx: usize,
}

/// Match log row: the decision and the score components behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub time: u64,
    pub order_id: u64,
    pub driver_id: u64,
    pub p_c: f64,
    pub r_star: f64,
    pub dv_star: f64,
    pub p_star: f64,
    pub edge_weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RoundDecision {
    pub matches: Vec<DecidedMatch>,
    pub records: Vec<MatchRecord>,
    pub matched_weight: f64,
}

/// Row of the threshold adaptation trace, one per feedback event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdTraceRow {
    pub time: u64,
    pub arm_index: usize,
    pub threshold: f64,
    pub q: f64,
    pub cr: f64,
    pub ar: f64,
}

/// Common decision interface. `step` is called once per dispatch round;
/// `feedback` once per feedback window with that window's settled rates.
pub trait DispatchPolicy {
    fn name(&self) -> &str;

    fn step(&mut self, snapshot: &MarketSnapshot, t: u64) -> RoundDecision;

    fn feedback(&mut self, cr: f64, ar: f64, t: u64) -> Option<ThresholdTraceRow> {
        let _ = (cr, ar, t);
        None
    }

    /// Cadence at which the driver loop should deliver `feedback`.
    fn feedback_interval_s(&self) -> u64 {
        60
    }

    fn value_table(&self) -> Option<&ValueTable> {
        None
    }

    /// Currently active pruning threshold, when the policy has one.
    fn threshold(&self) -> Option<f64> {
        None
    }
}

/// One dispatched order waiting for the next batch update.
#[derive(Debug, Clone, Copy)]
struct BufferedDispatch {
    driver_cell: GridCell,
    origin: GridCell,
    destination: GridCell,
    raw_price: f64,
    completion_prob: f64,
    pickup_m: f64,
}

/// The learning dispatcher: standardized edge scoring over a TD-learned value
/// table, maximum-weight matching, and bandit-adapted completion pruning.
pub struct RlwPolicy {
    name: String,
    cfg: RlwConfig,
    schedule: WeightSchedule,
    gamma: Discount,
    store: ValueStore,
    smoother: RewardSmoother,
    stds: StandardizerSet,
    bandit: Option<LmUcbState>,
    threshold: f64,
    buffer: Vec<BufferedDispatch>,
}

impl RlwPolicy {
    pub fn new(name: impl Into<String>, cfg: RlwConfig, grid: &Grid, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let cells = grid.cell_count();
        let gamma = Discount::new(cfg.gamma)?;
        let store = ValueStore::new(cells, gamma, cfg.update_rule())?;
        let smoother =
            RewardSmoother::new(cfg.smoother_beta, cells)?.with_strict_cold_start(cfg.strict_cold_start);
        let std = || Standardizer::new(cfg.std_mean_decay, cfg.std_var_decay, cfg.std_epsilon);
        let stds = StandardizerSet::new(std()?, std()?, std()?);
        let (bandit, threshold) = if cfg.adapt_threshold {
            let b = LmUcbState::new(cfg.bandit.clone(), rng)?;
            let th = b.threshold();
            (Some(b), th)
        } else {
            (None, cfg.fixed_threshold)
        };
        Ok(RlwPolicy {
            name: name.into(),
            schedule: cfg.schedule(),
            gamma,
            store,
            smoother,
            stds,
            bandit,
            threshold,
            buffer: Vec::new(),
            cfg,
        })
    }

    /// Score and solve one round without touching learning state.
    fn decide(&self, snapshot: &MarketSnapshot, t: u64) -> (MatchResult, Vec<MatchRecord>) {
        if self.cfg.standardize {
            let weights = interpolate_weights(&self.schedule, t);
            let (result, scored) = match_round(
                snapshot,
                &self.store.table,
                &self.smoother,
                &self.stds,
                &weights,
                self.threshold,
                self.gamma,
            );
            let records = result
                .matched
                .iter()
                .map(|m| {
                    let pair = &snapshot.candidate_pairs[m.pair_idx];
                    let s = &scored[m.pair_idx];
                    MatchRecord {
                        time: t,
                        order_id: snapshot.order(pair).order_id,
                        driver_id: snapshot.driver(pair).driver_id,
                        p_c: pair.completion_prob,
                        r_star: s.r_star,
                        dv_star: s.dv_star,
                        p_star: s.p_star,
                        edge_weight: s.weight,
                    }
                })
                .collect();
            (result, records)
        } else {
            let g = self.gamma.get();
            let mut edges = Vec::with_capacity(snapshot.candidate_pairs.len());
            let mut components = Vec::with_capacity(snapshot.candidate_pairs.len());
            for (k, pair) in snapshot.candidate_pairs.iter().enumerate() {
                let order = snapshot.order(pair);
                let driver = snapshot.driver(pair);
                let reward = if self.cfg.smooth_rewards {
                    self.smoother.value(order.origin)
                } else {
                    order.price
                };
                let dv_raw = g * self.store.table.get(order.destination)
                    - self.store.table.get(driver.location);
                let penalty_km = pair.pickup_distance_m / 1000.0;
                let weight = raw_edge_utility(
                    pair.completion_prob,
                    reward,
                    dv_raw,
                    penalty_km,
                    self.cfg.raw_w_rew,
                    self.cfg.raw_w_res,
                    self.cfg.raw_w_p,
                );
                components.push((reward, dv_raw, penalty_km, weight));
                edges.push(WeightedEdge {
                    pair_idx: k,
                    order_idx: pair.order_idx,
                    driver_idx: pair.driver_idx,
                    completion_prob: pair.completion_prob,
                    weight,
                });
            }
            let pruned = prune(edges, self.threshold);
            let result = solve_assignment(
                &pruned,
                snapshot.open_orders.len(),
                snapshot.idle_drivers.len(),
            );
            let records = result
                .matched
                .iter()
                .map(|m| {
                    let pair = &snapshot.candidate_pairs[m.pair_idx];
                    let (reward, dv_raw, penalty_km, weight) = components[m.pair_idx];
                    MatchRecord {
                        time: t,
                        order_id: snapshot.order(pair).order_id,
                        driver_id: snapshot.driver(pair).driver_id,
                        p_c: pair.completion_prob,
                        r_star: reward,
                        dv_star: dv_raw,
                        p_star: penalty_km,
                        edge_weight: weight,
                    }
                })
                .collect();
            (result, records)
        }
    }

    /// Fold the buffered dispatches and current idle drivers into the
    /// conditioning state and value table. Single pass, in decision order:
    /// each item sees the table as left by the previous one.
    fn apply_updates(&mut self, idle_cells: &[GridCell]) {
        let buffer = std::mem::take(&mut self.buffer);
        for b in &buffer {
            let reward = if self.cfg.smooth_rewards {
                self.smoother
                    .update(b.origin, b.raw_price)
                    .expect("order prices are validated non-negative at construction");
                self.smoother.value(b.origin)
            } else {
                b.raw_price
            };
            let dv_raw = self.gamma.get() * self.store.table.get(b.destination)
                - self.store.table.get(b.driver_cell);
            if self.cfg.standardize {
                self.stds.reward.update(reward);
                self.stds.residual.update(dv_raw);
                self.stds.pickup.update(b.pickup_m);
            }
            let sample = crate::value::DispatchSample::dispatch(
                b.driver_cell,
                b.destination,
                reward,
                b.completion_prob,
            );
            self.store.apply_sample(&sample);
        }
        for &cell in idle_cells {
            self.store.apply_sample(&crate::value::DispatchSample::idle(cell));
        }
    }
}

impl DispatchPolicy for RlwPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, snapshot: &MarketSnapshot, t: u64) -> RoundDecision {
        let (result, records) = self.decide(snapshot, t);
        let mut matched_driver = vec![false; snapshot.idle_drivers.len()];
        for m in &result.matched {
            matched_driver[m.driver_idx] = true;
            let pair = &snapshot.candidate_pairs[m.pair_idx];
            let order = snapshot.order(pair);
            self.buffer.push(BufferedDispatch {
                driver_cell: snapshot.driver(pair).location,
                origin: order.origin,
                destination: order.destination,
                raw_price: order.price,
                completion_prob: pair.completion_prob,
                pickup_m: pair.pickup_distance_m,
            });
        }
        if t % self.cfg.update_interval_s == 0 {
            let idle_cells: Vec<GridCell> = snapshot
                .idle_drivers
                .iter()
                .enumerate()
                .filter(|(i, _)| !matched_driver[*i])
                .map(|(_, d)| d.location)
                .collect();
            self.apply_updates(&idle_cells);
        }
        RoundDecision {
            matches: result
                .matched
                .iter()
                .map(|m| DecidedMatch {
                    order_idx: m.order_idx,
                    driver_idx: m.driver_idx,
                    pair_idx: m.pair_idx,
                })
                .collect(),
            records,
            matched_weight: result.total_weight,
        }
    }

    fn feedback(&mut self, cr: f64, ar: f64, t: u64) -> Option<ThresholdTraceRow> {
        let bandit = self.bandit.as_mut()?;
        bandit
            .feedback(cr, ar)
            .expect("window rates are valid by construction");
        self.threshold = bandit.threshold();
        Some(ThresholdTraceRow {
            time: t,
            arm_index: bandit.current_arm(),
            threshold: bandit.threshold(),
            q: bandit.quality(bandit.current_arm()),
            cr,
            ar,
        })
    }

    fn feedback_interval_s(&self) -> u64 {
        self.cfg.feedback_interval_s
    }

    fn value_table(&self) -> Option<&ValueTable> {
        Some(&self.store.table)
    }

    fn threshold(&self) -> Option<f64> {
        Some(self.threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct V1d3Config {
    pub gamma: f64,
    pub alpha: f64,
    pub update_interval_s: u64,
}

impl Default for V1d3Config {
    fn default() -> Self {
        V1d3Config { gamma: default_gamma(), alpha: 0.05, update_interval_s: 10 }
    }
}

impl V1d3Config {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval_s == 0 {
            return Err(Error::config("v1d3 update interval must be positive"));
        }
        Discount::new(self.gamma)?;
        UpdateRule::Sgd { alpha: self.alpha }.validate()
    }
}

/// Greedy-value baseline: raw price plus discounted value gain as the edge
/// utility, constant-step value updates, no conditioning, no pruning.
pub struct V1d3Policy {
    name: String,
    cfg: V1d3Config,
    gamma: Discount,
    store: ValueStore,
    buffer: Vec<BufferedDispatch>,
}

impl V1d3Policy {
    pub fn new(name: impl Into<String>, cfg: V1d3Config, grid: &Grid) -> Result<Self> {
        if cfg.update_interval_s == 0 {
            return Err(Error::config("v1d3 update interval must be positive"));
        }
        let gamma = Discount::new(cfg.gamma)?;
        let store =
            ValueStore::new(grid.cell_count(), gamma, UpdateRule::Sgd { alpha: cfg.alpha })?;
        Ok(V1d3Policy { name: name.into(), cfg, gamma, store, buffer: Vec::new() })
    }
}

impl DispatchPolicy for V1d3Policy {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, snapshot: &MarketSnapshot, t: u64) -> RoundDecision {
        let g = self.gamma.get();
        let mut edges = Vec::with_capacity(snapshot.candidate_pairs.len());
        let mut components = Vec::with_capacity(snapshot.candidate_pairs.len());
        for (k, pair) in snapshot.candidate_pairs.iter().enumerate() {
            let order = snapshot.order(pair);
            let driver = snapshot.driver(pair);
            let dv_raw =
                g * self.store.table.get(order.destination) - self.store.table.get(driver.location);
            let penalty_km = pair.pickup_distance_m / 1000.0;
            let weight =
                raw_edge_utility(pair.completion_prob, order.price, dv_raw, penalty_km, 1.0, 1.0, 0.0);
            components.push((order.price, dv_raw, penalty_km, weight));
            edges.push(WeightedEdge {
                pair_idx: k,
                order_idx: pair.order_idx,
                driver_idx: pair.driver_idx,
                completion_prob: pair.completion_prob,
                weight,
            });
        }
        let result =
            solve_assignment(&edges, snapshot.open_orders.len(), snapshot.idle_drivers.len());

        let mut matched_driver = vec![false; snapshot.idle_drivers.len()];
        let mut records = Vec::with_capacity(result.matched.len());
        for m in &result.matched {
            matched_driver[m.driver_idx] = true;
            let pair = &snapshot.candidate_pairs[m.pair_idx];
            let order = snapshot.order(pair);
            let (reward, dv_raw, penalty_km, weight) = components[m.pair_idx];
            records.push(MatchRecord {
                time: t,
                order_id: order.order_id,
                driver_id: snapshot.driver(pair).driver_id,
                p_c: pair.completion_prob,
                r_star: reward,
                dv_star: dv_raw,
                p_star: penalty_km,
                edge_weight: weight,
            });
            self.buffer.push(BufferedDispatch {
                driver_cell: snapshot.driver(pair).location,
                origin: order.origin,
                destination: order.destination,
                raw_price: order.price,
                completion_prob: pair.completion_prob,
                pickup_m: pair.pickup_distance_m,
            });
        }

        if t % self.cfg.update_interval_s == 0 {
            let buffer = std::mem::take(&mut self.buffer);
            for b in &buffer {
                let sample = crate::value::DispatchSample::dispatch(
                    b.driver_cell,
                    b.destination,
                    b.raw_price,
                    b.completion_prob,
                );
                self.store.apply_sample(&sample);
            }
            for (i, d) in snapshot.idle_drivers.iter().enumerate() {
                if !matched_driver[i] {
                    self.store.apply_sample(&crate::value::DispatchSample::idle(d.location));
                }
            }
        }

        RoundDecision {
            matches: result
                .matched
                .iter()
                .map(|m| DecidedMatch {
                    order_idx: m.order_idx,
                    driver_idx: m.driver_idx,
                    pair_idx: m.pair_idx,
                })
                .collect(),
            records,
            matched_weight: result.total_weight,
        }
    }

    fn value_table(&self) -> Option<&ValueTable> {
        Some(&self.store.table)
    }
}

/// Bonus that makes every candidate edge positive so the solver maximizes
/// match count first and breaks ties by total pickup distance. Far larger
/// than any reachable sum of pickup distances.
const CARDINALITY_BONUS: f64 = 1e7;

/// Distance-greedy baseline: match as many orders as possible, nearest
/// drivers first. No learning state.
pub struct MyopicPolicy {
    name: String,
}

impl MyopicPolicy {
    pub fn new(name: impl Into<String>) -> Self {
        MyopicPolicy { name: name.into() }
    }
}

impl DispatchPolicy for MyopicPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, snapshot: &MarketSnapshot, t: u64) -> RoundDecision {
        let edges: Vec<WeightedEdge> = snapshot
            .candidate_pairs
            .iter()
            .enumerate()
            .map(|(k, pair)| WeightedEdge {
                pair_idx: k,
                order_idx: pair.order_idx,
                driver_idx: pair.driver_idx,
                completion_prob: pair.completion_prob,
                weight: CARDINALITY_BONUS - pair.pickup_distance_m,
            })
            .collect();
        let result =
            solve_assignment(&edges, snapshot.open_orders.len(), snapshot.idle_drivers.len());
        let records = result
            .matched
            .iter()
            .map(|m| {
                let pair = &snapshot.candidate_pairs[m.pair_idx];
                MatchRecord {
                    time: t,
                    order_id: snapshot.order(pair).order_id,
                    driver_id: snapshot.driver(pair).driver_id,
                    p_c: pair.completion_prob,
                    r_star: 0.0,
                    dv_star: 0.0,
                    p_star: pair.pickup_distance_m / 1000.0,
                    edge_weight: m.weight,
                }
            })
            .collect();
        RoundDecision {
            matches: result
                .matched
                .iter()
                .map(|m| DecidedMatch {
                    order_idx: m.order_idx,
                    driver_idx: m.driver_idx,
                    pair_idx: m.pair_idx,
                })
                .collect(),
            records,
            matched_weight: result.total_weight,
        }
    }
}

/// Greedy-value scoring over a fixed, pre-trained table. No updates at all:
/// useful for serving a table learned in a previous run.
pub struct FrozenPolicy {
    name: String,
    gamma: Discount,
    table: ValueTable,
}

impl FrozenPolicy {
    pub fn new(name: impl Into<String>, table: ValueTable, gamma: f64) -> Result<Self> {
        Ok(FrozenPolicy { name: name.into(), gamma: Discount::new(gamma)?, table })
    }
}

impl DispatchPolicy for FrozenPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, snapshot: &MarketSnapshot, t: u64) -> RoundDecision {
        let g = self.gamma.get();
        let edges: Vec<WeightedEdge> = snapshot
            .candidate_pairs
            .iter()
            .enumerate()
            .map(|(k, pair)| {
                let order = snapshot.order(pair);
                let driver = snapshot.driver(pair);
                let dv_raw =
                    g * self.table.get(order.destination) - self.table.get(driver.location);
                let weight = raw_edge_utility(
                    pair.completion_prob,
                    order.price,
                    dv_raw,
                    pair.pickup_distance_m / 1000.0,
                    1.0,
                    1.0,
                    0.0,
                );
                WeightedEdge {
                    pair_idx: k,
                    order_idx: pair.order_idx,
                    driver_idx: pair.driver_idx,
                    completion_prob: pair.completion_prob,
                    weight,
                }
            })
            .collect();
        let result =
            solve_assignment(&edges, snapshot.open_orders.len(), snapshot.idle_drivers.len());
        let records = result
            .matched
            .iter()
            .map(|m| {
                let pair = &snapshot.candidate_pairs[m.pair_idx];
                let order = snapshot.order(pair);
                let driver = snapshot.driver(pair);
                MatchRecord {
                    time: t,
                    order_id: order.order_id,
                    driver_id: driver.driver_id,
                    p_c: pair.completion_prob,
                    r_star: order.price,
                    dv_star: g * self.table.get(order.destination) - self.table.get(driver.location),
                    p_star: pair.pickup_distance_m / 1000.0,
                    edge_weight: m.weight,
                }
            })
            .collect();
        RoundDecision {
            matches: result
                .matched
                .iter()
                .map(|m| DecidedMatch {
                    order_idx: m.order_idx,
                    driver_idx: m.driver_idx,
                    pair_idx: m.pair_idx,
                })
                .collect(),
            records,
            matched_weight: result.total_weight,
        }
    }

    fn value_table(&self) -> Option<&ValueTable> {
        Some(&self.table)
    }
}
