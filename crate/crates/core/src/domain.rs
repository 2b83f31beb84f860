//! Core marketplace entities: the spatial grid, orders, drivers, candidate
//! order-driver pairs, and dispatch assignments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular lattice of square cells. Cell ids are row-major:
/// `id = row * cols + col`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: u16,
    pub cols: u16,
    /// Edge length of one cell in meters.
    pub cell_size_m: f64,
}

impl Grid {
    pub fn new(rows: u16, cols: u16, cell_size_m: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("grid dimensions must be positive"));
        }
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(Error::config("grid cell size must be a positive length"));
        }
        Ok(Grid { rows, cols, cell_size_m })
    }

    pub fn cell_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn cell(&self, row: u16, col: u16) -> GridCell {
        assert!(row < self.rows && col < self.cols, "cell ({row},{col}) outside grid");
        GridCell { id: row as u32 * self.cols as u32 + col as u32, row, col }
    }

    pub fn cell_from_id(&self, id: u32) -> GridCell {
        assert!((id as usize) < self.cell_count(), "cell id {id} outside grid");
        GridCell { id, row: (id / self.cols as u32) as u16, col: (id % self.cols as u32) as u16 }
    }

    /// Euclidean distance between cell centers in meters.
    pub fn distance_m(&self, a: GridCell, b: GridCell) -> f64 {
        let dr = a.row as f64 - b.row as f64;
        let dc = a.col as f64 - b.col as f64;
        (dr * dr + dc * dc).sqrt() * self.cell_size_m
    }
}

/// One cell of the grid. `id` is redundant with `(row, col)` and kept so the
/// cell can index flat per-cell tables directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridCell {
    pub id: u32,
    pub row: u16,
    pub col: u16,
}

impl GridCell {
    pub fn index(&self) -> usize {
        self.id as usize
    }
}

/// A rider request. `trip_duration_s` is how long the on-trip leg takes once
/// the driver reaches the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub order_id: u64,
    pub origin: GridCell,
    pub destination: GridCell,
    pub price: f64,
    pub request_time: u64,
    pub trip_duration_s: u64,
}

impl Order {
    pub fn new(
        order_id: u64,
        origin: GridCell,
        destination: GridCell,
        price: f64,
        request_time: u64,
        trip_duration_s: u64,
    ) -> Result<Self> {
        if !(price.is_finite() && price > 0.0) {
            return Err(Error::config(format!("order {order_id}: price must be positive")));
        }
        Ok(Order { order_id, origin, destination, price, request_time, trip_duration_s })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriverStatus {
    Idle,
    EnRoutePickup,
    OnTrip,
}

/// Snapshot view of one driver. `busy_until` is meaningful only when the
/// status is not `Idle`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Driver {
    pub driver_id: u64,
    pub location: GridCell,
    pub status: DriverStatus,
    pub busy_until: u64,
}

impl Driver {
    pub fn idle(driver_id: u64, location: GridCell) -> Self {
        Driver { driver_id, location, status: DriverStatus::Idle, busy_until: 0 }
    }
}

/// Candidate order-driver pairing within broadcast radius. Indices refer into
/// the snapshot's order and driver lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderDriverPair {
    pub order_idx: usize,
    pub driver_idx: usize,
    pub pickup_distance_m: f64,
    /// Probability the rider accepts and the trip completes; filled in from the
    /// completion model after candidate generation.
    pub completion_prob: f64,
}

/// All matchable state at one decision round.
#[derive(Debug, Clone)]
pub struct MarketSnapshot {
    pub time: u64,
    pub open_orders: Vec<Order>,
    pub idle_drivers: Vec<Driver>,
    pub candidate_pairs: Vec<OrderDriverPair>,
}

impl MarketSnapshot {
    pub fn order(&self, pair: &OrderDriverPair) -> &Order {
        &self.open_orders[pair.order_idx]
    }

    pub fn driver(&self, pair: &OrderDriverPair) -> &Driver {
        &self.idle_drivers[pair.driver_idx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Pending,
    Completed,
    Cancelled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignmentKind {
    Dispatch,
    Idle,
}

/// Order details captured on an assignment at decision time, so resolution and
/// learning never need to look the order up again.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignedOrder {
    pub order_id: u64,
    pub origin: GridCell,
    pub destination: GridCell,
    pub price: f64,
    pub completion_prob: f64,
    pub pickup_distance_m: f64,
    pub trip_duration_s: u64,
}

/// One decided dispatch (or an explicit idle marker). `order` is present
/// exactly when `kind` is `Dispatch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub kind: AssignmentKind,
    pub driver_id: u64,
    pub decided_time: u64,
    pub outcome: Outcome,
    pub order: Option<AssignedOrder>,
}

impl Assignment {
    pub fn dispatch(driver_id: u64, decided_time: u64, order: AssignedOrder) -> Self {
        Assignment {
            kind: AssignmentKind::Dispatch,
            driver_id,
            decided_time,
            outcome: Outcome::Pending,
            order: Some(order),
        }
    }

    pub fn idle(driver_id: u64, decided_time: u64) -> Self {
        Assignment {
            kind: AssignmentKind::Idle,
            driver_id,
            decided_time,
            outcome: Outcome::Pending,
            order: None,
        }
    }
}

/// Enumerate order-driver pairs whose pickup distance is within the broadcast
/// radius. Drivers are expected to be idle; busy drivers are skipped. Pair
/// order is deterministic: orders outer, drivers inner, both in list order.
/// `completion_prob` is initialized to 1 and set by the caller's completion
/// model.
pub fn build_candidate_pairs(
    orders: &[Order],
    drivers: &[Driver],
    grid: &Grid,
    broadcast_radius_m: f64,
) -> Vec<OrderDriverPair> {
    let mut pairs = Vec::new();
    for (oi, order) in orders.iter().enumerate() {
        for (di, driver) in drivers.iter().enumerate() {
            if driver.status != DriverStatus::Idle {
                continue;
            }
            let d = grid.distance_m(order.origin, driver.location);
            if d <= broadcast_radius_m {
                pairs.push(OrderDriverPair {
                    order_idx: oi,
                    driver_idx: di,
                    pickup_distance_m: d,
                    completion_prob: 1.0,
                });
            }
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(4, 5, 500.0).unwrap()
    }

    #[test]
    fn cell_id_round_trip() {
        let g = grid();
        for row in 0..g.rows {
            for col in 0..g.cols {
                let c = g.cell(row, col);
                assert_eq!(g.cell_from_id(c.id), c);
            }
        }
    }

    #[test]
    fn cell_ids_are_row_major() {
        let g = grid();
        assert_eq!(g.cell(0, 0).id, 0);
        assert_eq!(g.cell(0, 4).id, 4);
        assert_eq!(g.cell(1, 0).id, 5);
        assert_eq!(g.cell(3, 4).id, 19);
    }

    #[test]
    fn distance_scales_with_cell_size() {
        let g = grid();
        let a = g.cell(0, 0);
        let b = g.cell(3, 4);
        assert!((g.distance_m(a, b) - 2500.0).abs() < 1e-9);
        assert_eq!(g.distance_m(a, a), 0.0);
    }

    #[test]
    fn grid_rejects_degenerate_shapes() {
        assert!(Grid::new(0, 3, 500.0).is_err());
        assert!(Grid::new(3, 3, 0.0).is_err());
        assert!(Grid::new(3, 3, f64::NAN).is_err());
    }

    #[test]
    fn order_rejects_nonpositive_price() {
        let g = grid();
        assert!(Order::new(1, g.cell(0, 0), g.cell(1, 1), 0.0, 0, 60).is_err());
        assert!(Order::new(1, g.cell(0, 0), g.cell(1, 1), -2.0, 0, 60).is_err());
        assert!(Order::new(1, g.cell(0, 0), g.cell(1, 1), 8.5, 0, 60).is_ok());
    }

    #[test]
    fn candidate_pairs_respect_radius() {
        // Orders at (0,0) and (0,3) on a 500 m lattice, one driver at (0,0):
        // distances 0 and 1500 m, so a 1000 m radius keeps only the first.
        let g = grid();
        let orders = vec![
            Order::new(1, g.cell(0, 0), g.cell(1, 1), 10.0, 0, 60).unwrap(),
            Order::new(2, g.cell(0, 3), g.cell(1, 1), 10.0, 0, 60).unwrap(),
        ];
        let drivers = vec![Driver::idle(7, g.cell(0, 0))];
        let pairs = build_candidate_pairs(&orders, &drivers, &g, 1000.0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].order_idx, 0);

        // The frozen edge case: a single order at distance 1500 m with radius
        // 1000 m yields zero pairs.
        let far = vec![orders[1]];
        assert!(build_candidate_pairs(&far, &drivers, &g, 1000.0).is_empty());
    }

    #[test]
    fn candidate_pairs_skip_busy_drivers() {
        let g = grid();
        let orders = vec![Order::new(1, g.cell(0, 0), g.cell(1, 1), 10.0, 0, 60).unwrap()];
        let mut busy = Driver::idle(7, g.cell(0, 0));
        busy.status = DriverStatus::OnTrip;
        busy.busy_until = 400;
        let drivers = vec![busy, Driver::idle(8, g.cell(0, 1))];
        let pairs = build_candidate_pairs(&orders, &drivers, &g, 1000.0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].driver_idx, 1);
    }

    #[test]
    fn boundary_distance_is_included() {
        let g = grid();
        let orders = vec![Order::new(1, g.cell(0, 0), g.cell(1, 1), 10.0, 0, 60).unwrap()];
        let drivers = vec![Driver::idle(7, g.cell(0, 2))];
        let pairs = build_candidate_pairs(&orders, &drivers, &g, 1000.0);
        assert_eq!(pairs.len(), 1, "distance exactly equal to the radius is kept");
    }
}
