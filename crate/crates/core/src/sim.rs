//! Grid-world marketplace simulator.
//!
//! Demand arrives as Poisson order streams per cell per round (or replayed
//! from an event log), drivers serve trips with stochastic rider
//! accept/cancel outcomes, and a pluggable dispatch policy decides the
//! matching every round. The simulator tracks settled-request metrics, income,
//! and reproducibility fingerprints of both the demand stream and the
//! decision sequence.
//!
//! Randomness is split into independent streams derived from the base seed:
//! demand generation and outcome draws never share state, so two policies fed
//! the same seed see byte-identical demand regardless of how they decide.

use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::bandit::MetricsWindow;
use crate::domain::{
    build_candidate_pairs, AssignedOrder, Assignment, Driver, Grid, GridCell, MarketSnapshot,
    Order, Outcome,
};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::policy::{CompletionModel, DispatchPolicy, MatchRecord, ThresholdTraceRow};
use crate::value::ValueTable;

/// Derive an independent stream seed from a base seed. Splitmix64 finalizer:
/// consecutive tags map to well-separated states.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed tag for the demand stream.
pub const STREAM_DEMAND: u64 = 0;
/// Seed tag for rider outcome draws.
pub const STREAM_OUTCOME: u64 = 1;
/// Seed tag base for per-policy streams; slot `k` uses `STREAM_POLICY + k`.
pub const STREAM_POLICY: u64 = 2;

/// Compensated summation; keeps day-long income totals exact to the last bit
/// regardless of magnitude drift.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    c: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// A synthetic city: grid geometry, demand field, trip destination
/// distribution, pricing, fleet size, and rider completion behavior.
#[derive(Debug, Clone)]
pub struct CityPreset {
    pub name: String,
    pub grid: Grid,
    pub driver_count: u32,
    /// Expected orders per hour for each cell, by hour of day.
    pub hourly_intensity: Vec<[f64; 24]>,
    /// Per-origin cumulative destination distribution over cells.
    pub dest_cum: Vec<Vec<f64>>,
    pub price_base: f64,
    pub price_per_km: f64,
    pub completion: CompletionModel,
}

impl CityPreset {
    pub fn validate(&self) -> Result<()> {
        let n = self.grid.cell_count();
        if self.hourly_intensity.len() != n || self.dest_cum.len() != n {
            return Err(Error::config("preset tables must cover every grid cell"));
        }
        if self.driver_count == 0 {
            return Err(Error::config("preset needs at least one driver"));
        }
        for hours in &self.hourly_intensity {
            if hours.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::config("preset intensities must be non-negative"));
            }
        }
        for cum in &self.dest_cum {
            if cum.len() != n {
                return Err(Error::config("destination distribution must cover every cell"));
            }
            if cum.windows(2).any(|w| w[1] < w[0]) || *cum.last().unwrap() != 1.0 {
                return Err(Error::config("destination distribution must be cumulative up to 1"));
            }
        }
        if !(self.price_base >= 0.0 && self.price_per_km >= 0.0) {
            return Err(Error::config("preset prices must be non-negative"));
        }
        self.completion.validate()
    }

    fn sample_destination(&self, origin: GridCell, u: f64) -> GridCell {
        let cum = &self.dest_cum[origin.index()];
        let idx = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        self.grid.cell_from_id(idx as u32)
    }
}

/// Build a per-origin cumulative destination table from a relative weight
/// function. Origins with no positive weight anywhere are given a uniform
/// distribution over the other cells.
pub fn dest_cum_from_weights(
    grid: &Grid,
    weight: impl Fn(GridCell, GridCell) -> f64,
) -> Vec<Vec<f64>> {
    let n = grid.cell_count();
    let mut table = Vec::with_capacity(n);
    for o in 0..n {
        let origin = grid.cell_from_id(o as u32);
        let mut w: Vec<f64> = (0..n)
            .map(|d| {
                if d == o {
                    0.0
                } else {
                    weight(origin, grid.cell_from_id(d as u32)).max(0.0)
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            let share = 1.0 / (n - 1) as f64;
            for (d, x) in w.iter_mut().enumerate() {
                *x = if d == o { 0.0 } else { share };
            }
        } else {
            for x in &mut w {
                *x /= total;
            }
        }
        let mut cum = Vec::with_capacity(n);
        let mut acc = 0.0;
        for x in &w {
            acc += x;
            // Accumulation can overshoot 1 by a few ulps; clamping keeps the
            // table monotone with an exact final 1.
            cum.push(acc.min(1.0));
        }
        *cum.last_mut().unwrap() = 1.0;
        table.push(cum);
    }
    table
}

fn flat_hours(x: f64) -> [f64; 24] {
    [x; 24]
}

/// Two-peak weekday demand curve, normalized around 1.
const DAY_CURVE: [f64; 24] = [
    0.25, 0.18, 0.14, 0.12, 0.15, 0.35, 0.75, 1.25, 1.45, 1.15, 1.0, 1.05, 1.1, 1.05, 1.0, 1.05,
    1.2, 1.5, 1.55, 1.3, 1.0, 0.8, 0.55, 0.35,
];

fn curved_hours(base: f64) -> [f64; 24] {
    let mut h = [0.0; 24];
    for (i, x) in h.iter_mut().enumerate() {
        *x = base * DAY_CURVE[i];
    }
    h
}

pub fn preset_names() -> &'static [&'static str] {
    &["uniform", "imbalanced", "city_i", "city_ii", "city_iii"]
}

/// Look up a built-in city preset by name.
pub fn preset(name: &str) -> Result<CityPreset> {
    let p = match name {
        "uniform" => uniform_preset(),
        "imbalanced" => imbalanced_preset(),
        "city_i" => city_i_preset(),
        "city_ii" => city_ii_preset(),
        "city_iii" => city_iii_preset(),
        other => {
            return Err(Error::config(format!(
                "unknown preset '{other}'; available: {}",
                preset_names().join(", ")
            )))
        }
    };
    p.validate()?;
    Ok(p)
}

/// Flat demand, uniform destinations, forgiving riders. A calm market for
/// smoke tests and invariance checks.
fn uniform_preset() -> CityPreset {
    let grid = Grid::new(8, 8, 500.0).unwrap();
    let n = grid.cell_count();
    CityPreset {
        name: "uniform".into(),
        grid,
        driver_count: 40,
        hourly_intensity: vec![flat_hours(4.5); n],
        dest_cum: dest_cum_from_weights(&grid, |_, _| 1.0),
        price_base: 6.0,
        price_per_km: 1.5,
        completion: CompletionModel { a: 2.0, b_per_km: 0.6 },
    }
}

/// A compact live city in the middle of a much larger map. Demand spikes in a
/// tight central hot spot in the morning and spreads over the inner disk in
/// the evening; everything past the inner disk is near-dead. A small uniform
/// destination leak keeps dropping drivers outside the live zone, far enough
/// from open demand that careless fleets bleed supply over the day and answer
/// rate collapses exactly when demand peaks.
fn imbalanced_preset() -> CityPreset {
    let grid = Grid::new(20, 20, 600.0).unwrap();
    let n = grid.cell_count();
    let dist_center = |c: GridCell| {
        let dr = c.row as f64 - 9.5;
        let dc = c.col as f64 - 9.5;
        (dr * dr + dc * dc).sqrt()
    };
    // Two overlapping daily waves: a sharp commute spike and a broad evening
    // plateau. Each cell mixes them by location.
    let mut morning = [0.0; 24];
    let mut evening = [0.0; 24];
    for h in 0..24 {
        let hm = h as f64 - 8.0;
        let he = h as f64 - 18.0;
        morning[h] = (-hm * hm / 8.0).exp();
        evening[h] = (-he * he / 12.5).exp();
    }
    let mut intensity = Vec::with_capacity(n);
    for id in 0..n {
        let cell = grid.cell_from_id(id as u32);
        let d = dist_center(cell);
        let hot = 26.0 * (-d * d / 5.0).exp();
        let spread = if d <= 6.5 { 3.5 } else { 0.0 };
        let floor = if d <= 6.5 { 0.3 } else { 0.015 };
        let mut hours = [0.0; 24];
        for h in 0..24 {
            hours[h] = hot * morning[h] + spread * evening[h] + floor;
        }
        intensity.push(hours);
    }
    // Destinations: short local rides with a pull back toward the center,
    // plus a small uniform leak that can drop a driver anywhere on the map,
    // including the outer waste beyond matching reach of the live zone.
    let dest_cum = dest_cum_from_weights(&grid, |origin, dest| {
        let dd = dist_center(dest);
        let pull = if dd <= 2.5 {
            1.6
        } else if dd <= 6.5 {
            1.0
        } else {
            0.5
        };
        let d = grid.distance_m(origin, dest) / 1000.0;
        pull * (-d / 1.1).exp() + 0.012
    });
    CityPreset {
        name: "imbalanced".into(),
        grid,
        driver_count: 65,
        hourly_intensity: intensity,
        dest_cum,
        price_base: 6.0,
        price_per_km: 0.4,
        completion: CompletionModel { a: 1.9, b_per_km: 1.0 },
    }
}

/// Large, dense, cancel-prone market with long average trips.
fn city_i_preset() -> CityPreset {
    let grid = Grid::new(20, 20, 500.0).unwrap();
    let n = grid.cell_count();
    let center = |c: GridCell| {
        let dr = c.row as f64 - 9.5;
        let dc = c.col as f64 - 9.5;
        (dr * dr + dc * dc).sqrt()
    };
    let mut intensity = Vec::with_capacity(n);
    for id in 0..n {
        let cell = grid.cell_from_id(id as u32);
        let base = 5.5 * (-center(cell) / 6.0).exp() + 0.4;
        intensity.push(curved_hours(base));
    }
    let dest_cum = dest_cum_from_weights(&grid, |origin, dest| {
        // Mild preference for longer rides pushes the mean trip above 5 km.
        let d = grid.distance_m(origin, dest) / 1000.0;
        if d < 1.0 {
            0.2
        } else {
            1.0 + 0.1 * d
        }
    });
    CityPreset {
        name: "city_i".into(),
        grid,
        driver_count: 130,
        hourly_intensity: intensity,
        dest_cum,
        price_base: 5.0,
        price_per_km: 1.6,
        completion: CompletionModel { a: 1.2, b_per_km: 0.9 },
    }
}

/// Supply-rich, high-completion market: nearly every request is answered and
/// completed.
fn city_ii_preset() -> CityPreset {
    let grid = Grid::new(10, 10, 500.0).unwrap();
    let n = grid.cell_count();
    CityPreset {
        name: "city_ii".into(),
        grid,
        driver_count: 90,
        hourly_intensity: vec![curved_hours(3.0); n],
        dest_cum: dest_cum_from_weights(&grid, |_, _| 1.0),
        price_base: 6.0,
        price_per_km: 1.4,
        completion: CompletionModel { a: 3.2, b_per_km: 0.25 },
    }
}

/// Sparse low-volume town with long trips, a tiny fleet, and patient riders.
/// Most requests go unanswered.
fn city_iii_preset() -> CityPreset {
    let grid = Grid::new(6, 6, 1500.0).unwrap();
    let n = grid.cell_count();
    let dest_cum = dest_cum_from_weights(&grid, |origin, dest| {
        let d = grid.distance_m(origin, dest) / 1000.0;
        if d < 3.0 {
            0.3
        } else {
            1.0
        }
    });
    CityPreset {
        name: "city_iii".into(),
        grid,
        driver_count: 3,
        hourly_intensity: vec![curved_hours(1.1); n],
        dest_cum,
        price_base: 4.0,
        price_per_km: 1.2,
        completion: CompletionModel { a: 0.5, b_per_km: 0.35 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverEvent {
    Online,
    Offline,
}

/// One row of a trip event log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum TripEvent {
    Order {
        t: u64,
        id: u64,
        o_row: u16,
        o_col: u16,
        d_row: u16,
        d_col: u16,
        price: f64,
        dur_s: u64,
    },
    Driver {
        t: u64,
        id: u64,
        row: u16,
        col: u16,
        event: DriverEvent,
    },
}

impl TripEvent {
    pub fn time(&self) -> u64 {
        match self {
            TripEvent::Order { t, .. } | TripEvent::Driver { t, .. } => *t,
        }
    }
}

/// Recorded demand and fleet availability, replayable as a simulation input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripEventLog {
    pub events: Vec<TripEvent>,
}

impl TripEventLog {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0u64;
        let mut seen_orders = std::collections::HashSet::new();
        for e in &self.events {
            if e.time() < last {
                return Err(Error::config("event log must be sorted by time"));
            }
            last = e.time();
            if let TripEvent::Order { id, price, .. } = e {
                if !seen_orders.insert(*id) {
                    return Err(Error::config(format!("duplicate order id {id} in event log")));
                }
                if !(price.is_finite() && *price > 0.0) {
                    return Err(Error::config(format!("order {id} has non-positive price")));
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut *w, e).map_err(|e| Error::runtime(e.to_string()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<TripEventLog> {
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TripEvent = serde_json::from_str(&line)
                .map_err(|e| Error::config(format!("event log line {}: {e}", i + 1)))?;
            events.push(e);
        }
        let log = TripEventLog { events };
        log.validate()?;
        Ok(log)
    }
}

/// Runtime knobs shared by generation and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub horizon_s: u64,
    pub round_s: u64,
    pub max_wait_s: u64,
    pub broadcast_radius_m: f64,
    pub price_scale: f64,
    pub cancel_fraction: f64,
    pub driver_speed_mps: f64,
    pub report_window_s: u64,
    pub seed: u64,
    /// 0 disables periodic value table snapshots.
    pub value_snapshot_interval_s: u64,
    pub keep_match_log: bool,
    /// 0 runs a single policy; otherwise policies alternate every interval.
    pub flip_interval_s: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            horizon_s: 3_600,
            round_s: 2,
            max_wait_s: 300,
            broadcast_radius_m: 3_000.0,
            price_scale: 1.0,
            cancel_fraction: 0.5,
            driver_speed_mps: 8.0,
            report_window_s: 300,
            seed: 1,
            value_snapshot_interval_s: 0,
            keep_match_log: false,
            flip_interval_s: 0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.round_s == 0 {
            return Err(Error::config("round_s must be positive"));
        }
        // horizon_s 0 is legal and yields an empty report.
        if self.horizon_s % self.round_s != 0 {
            return Err(Error::config("horizon_s must be a multiple of round_s"));
        }
        if self.max_wait_s == 0 {
            return Err(Error::config("max_wait_s must be positive"));
        }
        if !(self.broadcast_radius_m.is_finite() && self.broadcast_radius_m > 0.0) {
            return Err(Error::config("broadcast_radius_m must be positive"));
        }
        if !(self.price_scale.is_finite() && self.price_scale > 0.0) {
            return Err(Error::config("price_scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cancel_fraction) {
            return Err(Error::config("cancel_fraction must lie in [0, 1]"));
        }
        if !(self.driver_speed_mps.is_finite() && self.driver_speed_mps > 0.0) {
            return Err(Error::config("driver_speed_mps must be positive"));
        }
        if self.report_window_s == 0 || self.report_window_s % self.round_s != 0 {
            return Err(Error::config("report_window_s must be a positive multiple of round_s"));
        }
        if self.value_snapshot_interval_s % self.round_s != 0 {
            return Err(Error::config("value_snapshot_interval_s must be a multiple of round_s"));
        }
        if self.flip_interval_s > 0 {
            for (name, m) in [("round_s", self.round_s), ("report_window_s", self.report_window_s)] {
                if self.flip_interval_s % m != 0 {
                    return Err(Error::config(format!(
                        "flip_interval_s must be a multiple of {name}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Where demand and fleet availability come from.
#[derive(Debug, Clone)]
pub enum DemandSource {
    Preset(CityPreset),
    Replay(TripEventLog),
}

/// A complete simulation world: geometry, rider behavior, and demand.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: Grid,
    pub completion: CompletionModel,
    pub demand: DemandSource,
    /// Preset name, when demand comes from a preset.
    pub preset_name: Option<String>,
}

impl Scenario {
    pub fn from_preset(p: CityPreset) -> Self {
        Scenario {
            grid: p.grid,
            completion: p.completion,
            preset_name: Some(p.name.clone()),
            demand: DemandSource::Preset(p),
        }
    }

    pub fn from_log(log: TripEventLog, grid: Grid, completion: CompletionModel) -> Result<Self> {
        log.validate()?;
        for e in &log.events {
            let ok = match *e {
                TripEvent::Order { o_row, o_col, d_row, d_col, .. } => {
                    o_row < grid.rows && o_col < grid.cols && d_row < grid.rows && d_col < grid.cols
                }
                TripEvent::Driver { row, col, .. } => row < grid.rows && col < grid.cols,
            };
            if !ok {
                return Err(Error::config("event log references cells outside the grid"));
            }
        }
        Ok(Scenario { grid, completion, demand: DemandSource::Replay(log), preset_name: None })
    }
}

/// Orders generated in one round for one cell's Poisson draw, in deterministic
/// cell order. Cells with zero intensity draw nothing and consume no
/// randomness.
pub fn generate_round_orders(
    preset: &CityPreset,
    t: u64,
    round_s: u64,
    price_scale: f64,
    speed_mps: f64,
    next_order_id: &mut u64,
    rng: &mut impl Rng,
) -> Vec<Order> {
    let hour = ((t / 3_600) % 24) as usize;
    let mut orders = Vec::new();
    for id in 0..preset.grid.cell_count() {
        let rate_per_s = preset.hourly_intensity[id][hour] / 3_600.0;
        let lambda = rate_per_s * round_s as f64;
        if lambda <= 0.0 {
            continue;
        }
        let dist = Poisson::new(lambda).expect("positive rate");
        let k = dist.sample(rng) as u64;
        for _ in 0..k {
            let origin = preset.grid.cell_from_id(id as u32);
            let u: f64 = rng.random();
            let destination = preset.sample_destination(origin, u);
            let trip_m = preset.grid.distance_m(origin, destination);
            let price =
                (preset.price_base + preset.price_per_km * trip_m / 1000.0) * price_scale;
            let dur_s = ((trip_m / speed_mps).ceil() as u64).max(1);
            orders.push(
                Order::new(*next_order_id, origin, destination, price, t, dur_s)
                    .expect("generated prices are positive"),
            );
            *next_order_id += 1;
        }
    }
    orders
}

/// Initial fleet placement: cells sampled proportional to mean daily demand
/// plus a small uniform floor. Shares the demand stream so generation and
/// replay of the same seed line up exactly.
pub fn sample_initial_drivers(preset: &CityPreset, rng: &mut impl Rng) -> Vec<(u64, GridCell)> {
    let n = preset.grid.cell_count();
    let mut weights: Vec<f64> = (0..n)
        .map(|i| preset.hourly_intensity[i].iter().sum::<f64>() / 24.0)
        .collect();
    let max_w = weights.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for w in &mut weights {
        *w += 0.05 * max_w;
    }
    let total: f64 = weights.iter().sum();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cum.push(acc);
    }
    *cum.last_mut().unwrap() = 1.0;
    (1..=preset.driver_count as u64)
        .map(|id| {
            let u: f64 = rng.random();
            let idx = cum.partition_point(|&c| c <= u).min(n - 1);
            (id, preset.grid.cell_from_id(idx as u32))
        })
        .collect()
}

/// Generate a replayable event log with the exact same demand stream a live
/// preset run with this seed would see: driver online events at t = 0, then
/// Poisson orders per round. `price_scale` is baked into logged prices.
pub fn gen_event_log(preset: &CityPreset, params: &SimParams) -> Result<TripEventLog> {
    params.validate()?;
    preset.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, STREAM_DEMAND));
    let mut events = Vec::new();
    for (id, cell) in sample_initial_drivers(preset, &mut rng) {
        events.push(TripEvent::Driver {
            t: 0,
            id,
            row: cell.row,
            col: cell.col,
            event: DriverEvent::Online,
        });
    }
    let mut next_order_id = 1u64;
    let mut t = 0u64;
    while t < params.horizon_s {
        for o in generate_round_orders(
            preset,
            t,
            params.round_s,
            params.price_scale,
            params.driver_speed_mps,
            &mut next_order_id,
            &mut rng,
        ) {
            events.push(TripEvent::Order {
                t,
                id: o.order_id,
                o_row: o.origin.row,
                o_col: o.origin.col,
                d_row: o.destination.row,
                d_col: o.destination.col,
                price: o.price,
                dur_s: o.trip_duration_s,
            });
        }
        t += params.round_s;
    }
    Ok(TripEventLog { events })
}

/// Draw the rider outcome for a pending dispatch assignment. Errors on double
/// resolution and on idle assignments, which have no outcome to draw.
pub fn resolve_assignment(
    assignment: &mut Assignment,
    model: &CompletionModel,
    rng: &mut impl Rng,
) -> Result<Outcome> {
    if assignment.outcome != Outcome::Pending {
        return Err(Error::runtime("assignment already resolved"));
    }
    let order = assignment
        .order
        .ok_or_else(|| Error::runtime("idle assignment has no outcome to resolve"))?;
    let p = model.completion_prob(order.pickup_distance_m);
    let u: f64 = rng.random();
    let outcome = if u < p { Outcome::Completed } else { Outcome::Cancelled };
    assignment.outcome = outcome;
    Ok(outcome)
}

#[derive(Debug, Clone)]
struct FleetDriver {
    id: u64,
    location: GridCell,
    idle: bool,
    busy_until: u64,
    /// Relocation applied when the current trip's busy period ends.
    pending_dest: Option<GridCell>,
    pending_offline: bool,
}

/// Settled-request totals for one policy (or the whole run).
#[derive(Debug, Clone, Default)]
struct TotalsAcc {
    requests: u64,
    accepted: u64,
    completed: u64,
    cancelled: u64,
    expired: u64,
    income: KahanSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Settle {
    Completed { price: f64 },
    Cancelled,
    Expired,
}

impl TotalsAcc {
    fn settle(&mut self, kind: Settle) {
        self.requests += 1;
        match kind {
            Settle::Completed { price } => {
                self.accepted += 1;
                self.completed += 1;
                self.income.add(price);
            }
            Settle::Cancelled => {
                self.accepted += 1;
                self.cancelled += 1;
            }
            Settle::Expired => {
                self.expired += 1;
            }
        }
    }

    fn into_totals(self, policy: &str) -> MetricTotals {
        let div = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        MetricTotals {
            policy: policy.to_string(),
            requests: self.requests,
            accepted: self.accepted,
            completed: self.completed,
            cancelled: self.cancelled,
            expired: self.expired,
            income: self.income.value(),
            cr: div(self.completed, self.requests),
            ar: div(self.accepted, self.requests),
            sr: div(self.completed, self.accepted),
        }
    }
}

/// Aggregated settled-request metrics. `requests` counts requests whose fate
/// was decided in scope; `cr`, `ar`, `sr` are completion, answer, and success
/// rates with zero denominators mapping to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTotals {
    pub policy: String,
    pub requests: u64,
    pub accepted: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub expired: u64,
    pub income: f64,
    pub cr: f64,
    pub ar: f64,
    pub sr: f64,
}

/// One report window row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window_start: u64,
    pub policy: String,
    pub requests: u64,
    pub accepted: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub expired: u64,
    pub income: f64,
    pub cr: f64,
    pub ar: f64,
    pub sr: f64,
}

/// Request-conservation counters over the whole run: every arrival is
/// eventually completed, cancelled, expired, or still open at the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub arrivals: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub expired: u64,
    pub open_at_end: u64,
}

impl Conservation {
    pub fn balanced(&self) -> bool {
        self.arrivals == self.completed + self.cancelled + self.expired + self.open_at_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub horizon_s: u64,
    pub price_scale: f64,
    pub preset: Option<String>,
    pub grid_rows: u16,
    pub grid_cols: u16,
    pub cell_size_m: f64,
    pub policies: Vec<String>,
    pub flip_interval_s: u64,
    pub totals: MetricTotals,
    pub per_policy: Vec<MetricTotals>,
    pub windows: Vec<WindowRow>,
    pub conservation: Conservation,
    pub demand_hash: u64,
    pub decision_hash: u64,
}

/// Periodic copy of one policy's value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSnapshot {
    pub t: u64,
    pub policy: String,
    pub values: Vec<f64>,
}

/// Everything a single run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub match_log: Vec<MatchRecord>,
    pub threshold_trace: Vec<ThresholdTraceRow>,
    pub value_snapshots: Vec<ValueSnapshot>,
    pub final_tables: Vec<(String, ValueTable)>,
}

/// Drive `policies` through the scenario. With a flip interval the policies
/// alternate control of the marketplace in wall-clock blocks and keep
/// learning only while active; otherwise `policies[0]` runs throughout.
///
/// Metrics attribute each request to the policy active when its fate settles:
/// dispatch outcomes settle in the decision round, expiries at the expiry
/// round.
pub fn run(
    scenario: &Scenario,
    policies: &mut [Box<dyn DispatchPolicy>],
    params: &SimParams,
) -> Result<RunOutput> {
    params.validate()?;
    if policies.is_empty() {
        return Err(Error::config("run needs at least one policy"));
    }
    if params.flip_interval_s == 0 && policies.len() > 1 {
        return Err(Error::config("multiple policies need a flip interval"));
    }
    let feedback_interval = policies[0].feedback_interval_s();
    if feedback_interval == 0 || feedback_interval % params.round_s != 0 {
        return Err(Error::config("feedback interval must be a positive multiple of round_s"));
    }
    if policies.iter().any(|p| p.feedback_interval_s() != feedback_interval) {
        return Err(Error::config("policies in one run must share a feedback interval"));
    }
    if params.flip_interval_s > 0 && params.flip_interval_s % feedback_interval != 0 {
        return Err(Error::config("flip_interval_s must be a multiple of the feedback interval"));
    }

    let grid = &scenario.grid;
    let mut demand_rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, STREAM_DEMAND));
    let mut outcome_rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, STREAM_OUTCOME));

    let mut fleet: Vec<FleetDriver> = Vec::new();
    if let DemandSource::Preset(p) = &scenario.demand {
        if p.grid != *grid {
            return Err(Error::config("scenario grid does not match preset grid"));
        }
        fleet.extend(sample_initial_drivers(p, &mut demand_rng).into_iter().map(|(id, cell)| {
            FleetDriver {
                id,
                location: cell,
                idle: true,
                busy_until: 0,
                pending_dest: None,
                pending_offline: false,
            }
        }));
    }

    let mut next_order_id = 1u64;
    let mut event_cursor = 0usize;
    let mut open: Vec<Order> = Vec::new();

    let mut demand_hash = Fnv1a::new();
    let mut decision_hash = Fnv1a::new();

    let n_policies = policies.len();
    let mut per_policy: Vec<TotalsAcc> = vec![TotalsAcc::default(); n_policies];
    let mut overall = TotalsAcc::default();
    let mut conservation =
        Conservation { arrivals: 0, completed: 0, cancelled: 0, expired: 0, open_at_end: 0 };

    let mut feedback_window = MetricsWindow::new(0, feedback_interval);
    let mut report_acc = TotalsAcc::default();
    let mut report_start = 0u64;
    let mut windows: Vec<WindowRow> = Vec::new();

    let mut match_log: Vec<MatchRecord> = Vec::new();
    let mut threshold_trace: Vec<ThresholdTraceRow> = Vec::new();
    let mut value_snapshots: Vec<ValueSnapshot> = Vec::new();

    let mut t = 0u64;
    while t < params.horizon_s {
        let active = if params.flip_interval_s > 0 {
            ((t / params.flip_interval_s) as usize) % n_policies
        } else {
            0
        };

        // Value snapshots capture the state before this round mutates it.
        if params.value_snapshot_interval_s > 0 && t % params.value_snapshot_interval_s == 0 {
            for p in policies.iter() {
                if let Some(table) = p.value_table() {
                    value_snapshots.push(ValueSnapshot {
                        t,
                        policy: p.name().to_string(),
                        values: table.as_slice().to_vec(),
                    });
                }
            }
        }

        // Release drivers whose busy period ended.
        let mut removed_any = false;
        for d in fleet.iter_mut() {
            if !d.idle && d.busy_until <= t {
                d.idle = true;
                if let Some(dest) = d.pending_dest.take() {
                    d.location = dest;
                }
                if d.pending_offline {
                    removed_any = true;
                }
            }
        }
        if removed_any {
            fleet.retain(|d| !(d.idle && d.pending_offline));
        }

        // Bring in this round's demand and fleet events.
        let mut arrivals: Vec<Order> = Vec::new();
        match &scenario.demand {
            DemandSource::Preset(p) => {
                arrivals = generate_round_orders(
                    p,
                    t,
                    params.round_s,
                    params.price_scale,
                    params.driver_speed_mps,
                    &mut next_order_id,
                    &mut demand_rng,
                );
            }
            DemandSource::Replay(log) => {
                while event_cursor < log.events.len() && log.events[event_cursor].time() <= t {
                    match log.events[event_cursor] {
                        TripEvent::Order { t: et, id, o_row, o_col, d_row, d_col, price, dur_s } => {
                            let order = Order::new(
                                id,
                                grid.cell(o_row, o_col),
                                grid.cell(d_row, d_col),
                                price * params.price_scale,
                                et,
                                dur_s,
                            )?;
                            arrivals.push(order);
                        }
                        TripEvent::Driver { id, row, col, event, .. } => match event {
                            DriverEvent::Online => {
                                if fleet.iter().any(|d| d.id == id) {
                                    return Err(Error::config(format!(
                                        "driver {id} came online twice"
                                    )));
                                }
                                fleet.push(FleetDriver {
                                    id,
                                    location: grid.cell(row, col),
                                    idle: true,
                                    busy_until: 0,
                                    pending_dest: None,
                                    pending_offline: false,
                                });
                            }
                            DriverEvent::Offline => {
                                let d = fleet
                                    .iter_mut()
                                    .find(|d| d.id == id)
                                    .ok_or_else(|| {
                                        Error::config(format!("unknown driver {id} went offline"))
                                    })?;
                                if d.idle {
                                    let id = d.id;
                                    fleet.retain(|d| d.id != id);
                                } else {
                                    d.pending_offline = true;
                                }
                            }
                        },
                    }
                    event_cursor += 1;
                }
            }
        }

        for o in &arrivals {
            demand_hash.write_u64(o.request_time);
            demand_hash.write_u64(o.order_id);
            demand_hash.write_u64(o.origin.id as u64);
            demand_hash.write_u64(o.destination.id as u64);
            demand_hash.write_f64(o.price);
            demand_hash.write_u64(o.trip_duration_s);
            conservation.arrivals += 1;
        }
        open.extend(arrivals);

        // Expire requests that waited too long, before matching.
        let mut still_open = Vec::with_capacity(open.len());
        for o in open.drain(..) {
            if t >= o.request_time + params.max_wait_s {
                conservation.expired += 1;
                feedback_window.record_settled(false, false);
                report_acc.settle(Settle::Expired);
                per_policy[active].settle(Settle::Expired);
                overall.settle(Settle::Expired);
            } else {
                still_open.push(o);
            }
        }
        open = still_open;

        // Snapshot the matchable market.
        let idle_drivers: Vec<Driver> = fleet
            .iter()
            .filter(|d| d.idle)
            .map(|d| Driver::idle(d.id, d.location))
            .collect();
        let mut pairs =
            build_candidate_pairs(&open, &idle_drivers, grid, params.broadcast_radius_m);
        for p in &mut pairs {
            p.completion_prob = scenario.completion.completion_prob(p.pickup_distance_m);
        }
        let snapshot = MarketSnapshot {
            time: t,
            open_orders: open.clone(),
            idle_drivers,
            candidate_pairs: pairs,
        };

        let decision = policies[active].step(&snapshot, t);

        for m in &decision.matches {
            let order = &snapshot.open_orders[m.order_idx];
            let driver = &snapshot.idle_drivers[m.driver_idx];
            decision_hash.write_u64(t);
            decision_hash.write_u64(order.order_id);
            decision_hash.write_u64(driver.driver_id);
        }
        if params.keep_match_log {
            match_log.extend(decision.records.iter().copied());
        }

        // Resolve dispatches in decision order.
        let mut matched_ids: Vec<u64> = Vec::with_capacity(decision.matches.len());
        for m in &decision.matches {
            let pair = &snapshot.candidate_pairs[m.pair_idx];
            let order = &snapshot.open_orders[m.order_idx];
            let driver_id = snapshot.idle_drivers[m.driver_idx].driver_id;
            matched_ids.push(order.order_id);

            let mut assignment = Assignment::dispatch(
                driver_id,
                t,
                AssignedOrder {
                    order_id: order.order_id,
                    origin: order.origin,
                    destination: order.destination,
                    price: order.price,
                    completion_prob: pair.completion_prob,
                    pickup_distance_m: pair.pickup_distance_m,
                    trip_duration_s: order.trip_duration_s,
                },
            );
            let outcome = resolve_assignment(&mut assignment, &scenario.completion, &mut outcome_rng)?;

            let fd = fleet
                .iter_mut()
                .find(|d| d.id == driver_id)
                .expect("matched driver exists in fleet");
            debug_assert!(fd.idle);
            let pickup_secs = pair.pickup_distance_m / params.driver_speed_mps;
            match outcome {
                Outcome::Completed => {
                    fd.idle = false;
                    fd.busy_until = t + pickup_secs.ceil() as u64 + order.trip_duration_s;
                    fd.pending_dest = Some(order.destination);
                    conservation.completed += 1;
                    feedback_window.record_settled(true, true);
                    report_acc.settle(Settle::Completed { price: order.price });
                    per_policy[active].settle(Settle::Completed { price: order.price });
                    overall.settle(Settle::Completed { price: order.price });
                }
                Outcome::Cancelled => {
                    fd.idle = false;
                    fd.busy_until = t + (pickup_secs * params.cancel_fraction).ceil() as u64;
                    fd.pending_dest = None;
                    conservation.cancelled += 1;
                    feedback_window.record_settled(true, false);
                    report_acc.settle(Settle::Cancelled);
                    per_policy[active].settle(Settle::Cancelled);
                    overall.settle(Settle::Cancelled);
                }
                Outcome::Pending => unreachable!("resolution always settles"),
            }
        }
        if !matched_ids.is_empty() {
            open.retain(|o| !matched_ids.contains(&o.order_id));
        }

        // Threshold adaptation feedback at the end of its window.
        if t > 0 && t % feedback_interval == 0 {
            let rates = feedback_window.rates();
            if let Some(row) = policies[active].feedback(rates.cr, rates.ar, t) {
                threshold_trace.push(row);
            }
            feedback_window.reset(t);
        }

        // Close the report window on its boundary.
        if (t + params.round_s) % params.report_window_s == 0 {
            let totals = std::mem::take(&mut report_acc).into_totals(policies[active].name());
            windows.push(WindowRow {
                window_start: report_start,
                policy: totals.policy,
                requests: totals.requests,
                accepted: totals.accepted,
                completed: totals.completed,
                cancelled: totals.cancelled,
                expired: totals.expired,
                income: totals.income,
                cr: totals.cr,
                ar: totals.ar,
                sr: totals.sr,
            });
            report_start = t + params.round_s;
        }

        t += params.round_s;
    }

    // Flush a trailing partial window.
    if report_start < params.horizon_s {
        let active = if params.flip_interval_s > 0 {
            (((params.horizon_s - params.round_s) / params.flip_interval_s) as usize) % n_policies
        } else {
            0
        };
        let totals = std::mem::take(&mut report_acc).into_totals(policies[active].name());
        windows.push(WindowRow {
            window_start: report_start,
            policy: totals.policy,
            requests: totals.requests,
            accepted: totals.accepted,
            completed: totals.completed,
            cancelled: totals.cancelled,
            expired: totals.expired,
            income: totals.income,
            cr: totals.cr,
            ar: totals.ar,
            sr: totals.sr,
        });
    }

    conservation.open_at_end = open.len() as u64;

    let final_tables: Vec<(String, ValueTable)> = policies
        .iter()
        .filter_map(|p| p.value_table().map(|tbl| (p.name().to_string(), tbl.clone())))
        .collect();

    let report = RunReport {
        seed: params.seed,
        horizon_s: params.horizon_s,
        price_scale: params.price_scale,
        preset: scenario.preset_name.clone(),
        grid_rows: grid.rows,
        grid_cols: grid.cols,
        cell_size_m: grid.cell_size_m,
        policies: policies.iter().map(|p| p.name().to_string()).collect(),
        flip_interval_s: params.flip_interval_s,
        totals: overall.into_totals("all"),
        per_policy: per_policy
            .into_iter()
            .zip(policies.iter())
            .map(|(acc, p)| acc.into_totals(p.name()))
            .collect(),
        windows,
        conservation,
        demand_hash: demand_hash.finish(),
        decision_hash: decision_hash.finish(),
    };

    Ok(RunOutput { report, match_log, threshold_trace, value_snapshots, final_tables })
}
