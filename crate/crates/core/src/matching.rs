//! Edge scoring, pruning, and maximum-weight bipartite assignment for one
//! dispatch round.
//!
//! Candidate order-driver pairs are scored into a single utility per edge,
//! low-completion-probability edges are pruned, and a Kuhn-Munkres solve picks
//! the assignment maximizing total utility. Matching is free-cardinality: an
//! edge with non-positive utility is never forced into the solution just to
//! raise the match count.

use crate::conditioning::{RewardSmoother, Standardizer};
use crate::domain::{MarketSnapshot, OrderDriverPair};
use crate::error::{Error, Result};
use crate::value::{Discount, ValueTable};

/// Mixing weights for the edge utility. `w_res` always complements `w_rew`,
/// so the reward/residual trade-off is a single degree of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeWeights {
    pub w_rew: f64,
    pub w_res: f64,
    pub w_p: f64,
}

impl EdgeWeights {
    pub fn new(w_rew: f64, w_p: f64) -> Result<Self> {
        if !(w_rew.is_finite() && (0.0..=1.0).contains(&w_rew)) {
            return Err(Error::config("edge weight w_rew must lie in [0, 1]"));
        }
        if !(w_p.is_finite() && w_p >= 0.0) {
            return Err(Error::config("edge weight w_p must be non-negative"));
        }
        Ok(EdgeWeights { w_rew, w_res: 1.0 - w_rew, w_p })
    }
}

/// Combined utility of dispatching `pair`: completion probability times the
/// weighted mix of standardized immediate reward, standardized residual value
/// gain, and a pickup-distance penalty.
pub fn edge_weight(
    pair: &OrderDriverPair,
    r_star: f64,
    dv_star: f64,
    p_star: f64,
    weights: &EdgeWeights,
) -> f64 {
    pair.completion_prob * (weights.w_rew * r_star + weights.w_res * dv_star - weights.w_p * p_star)
}

/// Raw-scale counterpart of [`edge_weight`] used by unconditioned scoring
/// paths. Keeping one shared expression makes degenerate configurations of
/// different policies agree bit-for-bit.
pub fn raw_edge_utility(
    completion_prob: f64,
    reward: f64,
    residual: f64,
    penalty: f64,
    w_rew: f64,
    w_res: f64,
    w_p: f64,
) -> f64 {
    completion_prob * (w_rew * reward + w_res * residual - w_p * penalty)
}

/// One scored candidate edge. `pair_idx` points back into the snapshot's
/// candidate pair list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedEdge {
    pub pair_idx: usize,
    pub order_idx: usize,
    pub driver_idx: usize,
    pub completion_prob: f64,
    pub weight: f64,
}

/// Drop edges whose completion probability does not exceed the threshold.
/// The comparison is strict, so a threshold of 0 removes only hopeless edges
/// with probability exactly 0.
pub fn prune(edges: Vec<WeightedEdge>, threshold: f64) -> Vec<WeightedEdge> {
    debug_assert!((0.0..=1.0).contains(&threshold));
    edges.into_iter().filter(|e| e.completion_prob > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pair_idx: usize,
    pub order_idx: usize,
    pub driver_idx: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub matched: Vec<MatchedPair>,
    pub unmatched_orders: Vec<usize>,
    pub unmatched_drivers: Vec<usize>,
    pub total_weight: f64,
}

impl MatchResult {
    fn empty(n_orders: usize, n_drivers: usize) -> Self {
        MatchResult {
            matched: Vec::new(),
            unmatched_orders: (0..n_orders).collect(),
            unmatched_drivers: (0..n_drivers).collect(),
            total_weight: 0.0,
        }
    }
}

/// Maximum-weight assignment over the given edges. Orders and drivers each
/// appear in at most one matched pair, and only edges with strictly positive
/// weight are ever used; leaving both sides unmatched beats taking a
/// non-positive edge. Ties resolve deterministically by list order.
pub fn solve_assignment(edges: &[WeightedEdge], n_orders: usize, n_drivers: usize) -> MatchResult {
    if edges.is_empty() || n_orders == 0 || n_drivers == 0 {
        return MatchResult::empty(n_orders, n_drivers);
    }

    // Dense utility matrix, clamped at zero. A zero entry is indistinguishable
    // from "no edge": the solver may pass through it, but it is stripped from
    // the result either way.
    let mut w = vec![vec![0.0f64; n_drivers]; n_orders];
    let mut eidx = vec![vec![usize::MAX; n_drivers]; n_orders];
    for (k, e) in edges.iter().enumerate() {
        debug_assert!(e.order_idx < n_orders && e.driver_idx < n_drivers);
        debug_assert!(
            eidx[e.order_idx][e.driver_idx] == usize::MAX,
            "duplicate edge for order {} driver {}",
            e.order_idx,
            e.driver_idx
        );
        if e.weight > 0.0 {
            w[e.order_idx][e.driver_idx] = e.weight;
        }
        eidx[e.order_idx][e.driver_idx] = k;
    }

    // Kuhn-Munkres needs rows <= cols; transpose when orders outnumber drivers.
    let transpose = n_orders > n_drivers;
    let (rows, cols) = if transpose { (n_drivers, n_orders) } else { (n_orders, n_drivers) };
    let cost = |r: usize, c: usize| -> f64 {
        let (o, d) = if transpose { (c, r) } else { (r, c) };
        -w[o][d]
    };

    let row_to_col = hungarian_min(rows, cols, cost);

    let mut matched = Vec::new();
    for (r, &c) in row_to_col.iter().enumerate() {
        if c == usize::MAX {
            continue;
        }
        let (o, d) = if transpose { (c, r) } else { (r, c) };
        if w[o][d] > 0.0 {
            // Return the edge's own back-reference, not its slot in `edges`:
            // callers pass pruned slices whose positions do not line up with
            // the snapshot's candidate list.
            let e = &edges[eidx[o][d]];
            matched.push(MatchedPair {
                pair_idx: e.pair_idx,
                order_idx: o,
                driver_idx: d,
                weight: e.weight,
            });
        }
    }
    matched.sort_by_key(|m| m.order_idx);

    let mut order_used = vec![false; n_orders];
    let mut driver_used = vec![false; n_drivers];
    let mut total = 0.0;
    for m in &matched {
        order_used[m.order_idx] = true;
        driver_used[m.driver_idx] = true;
        total += m.weight;
    }
    MatchResult {
        matched,
        unmatched_orders: (0..n_orders).filter(|&i| !order_used[i]).collect(),
        unmatched_drivers: (0..n_drivers).filter(|&i| !driver_used[i]).collect(),
        total_weight: total,
    }
}

/// Hungarian algorithm with potentials for a dense minimization problem,
/// `rows <= cols`. Returns the assigned column for every row. Column scans go
/// in ascending index order with strict improvement, so equal-cost solutions
/// resolve to the lowest indices.
fn hungarian_min(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(rows <= cols);
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    // p[j]: row currently assigned to column j, 1-based; 0 means free.
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Standardizer triple for the three edge signals.
#[derive(Debug, Clone)]
pub struct StandardizerSet {
    pub reward: Standardizer,
    pub residual: Standardizer,
    pub pickup: Standardizer,
}

impl StandardizerSet {
    pub fn new(reward: Standardizer, residual: Standardizer, pickup: Standardizer) -> Self {
        StandardizerSet { reward, residual, pickup }
    }
}

/// Scored components of one candidate edge, kept for match logging and the
/// learning buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEdge {
    pub r_star: f64,
    pub dv_star: f64,
    pub p_star: f64,
    pub weight: f64,
}

/// Score every candidate pair of the snapshot, prune by completion
/// probability, and solve the assignment. Scoring reads the conditioning state
/// without mutating it; learning updates happen separately on the batch tick.
///
/// Returns the match result plus per-pair score components aligned with
/// `snapshot.candidate_pairs`.
pub fn match_round(
    snapshot: &MarketSnapshot,
    values: &ValueTable,
    smoother: &RewardSmoother,
    stds: &StandardizerSet,
    weights: &EdgeWeights,
    threshold: f64,
    gamma: Discount,
) -> (MatchResult, Vec<ScoredEdge>) {
    let g = gamma.get();
    let mut edges = Vec::with_capacity(snapshot.candidate_pairs.len());
    let mut scored = Vec::with_capacity(snapshot.candidate_pairs.len());
    for (k, pair) in snapshot.candidate_pairs.iter().enumerate() {
        let order = snapshot.order(pair);
        let driver = snapshot.driver(pair);
        let r_raw = smoother.value(order.origin);
        let dv_raw = g * values.get(order.destination) - values.get(driver.location);
        let r_star = stds.reward.standardize(r_raw);
        let dv_star = stds.residual.standardize(dv_raw);
        let p_star = stds.pickup.standardize(pair.pickup_distance_m);
        let weight = edge_weight(pair, r_star, dv_star, p_star, weights);
        scored.push(ScoredEdge { r_star, dv_star, p_star, weight });
        edges.push(WeightedEdge {
            pair_idx: k,
            order_idx: pair.order_idx,
            driver_idx: pair.driver_idx,
            completion_prob: pair.completion_prob,
            weight,
        });
    }
    let pruned = prune(edges, threshold);
    let result = solve_assignment(&pruned, snapshot.open_orders.len(), snapshot.idle_drivers.len());
    (result, scored)
}
