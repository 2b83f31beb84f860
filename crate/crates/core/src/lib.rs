//! Dispatch engine and marketplace simulator for ride-hailing style order/driver
//! matching. The engine learns a spatial value table online from dispatch and idle
//! transitions, scores order-driver edges through signal conditioning (reward
//! smoothing plus online standardization), solves a maximum-weight bipartite
//! assignment every round, and adapts a completion-probability pruning threshold
//! with a memory-limited UCB bandit. A grid-world simulator with configurable city
//! presets drives comparative experiments against myopic, greedy-value, and
//! frozen-table baselines.

pub mod bandit;
pub mod conditioning;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod hash;
pub mod matching;
pub mod policy;
pub mod runner;
pub mod sim;
pub mod value;

pub use error::{Error, Result};
