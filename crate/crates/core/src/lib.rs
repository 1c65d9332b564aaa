//! Multi-channel capacitated facility location.
//!
//! Facilities are chosen by a stochastic distorted greedy loop whose value
//! oracle is either an exact min-cost flow or a two-stage entropic optimal
//! transport approximation solved with Sinkhorn scaling.

pub mod cli;
pub mod decoupling;
pub mod error;
pub mod greedy;
pub mod instance;
pub mod model;
pub mod oracles;
pub mod reference;
pub mod sinkhorn;

pub use error::{Error, Result};
pub use greedy::{select_facilities, GreedyConfig, GreedyTrace};
pub use model::{AllocationPlan, Client, Edge, Facility, NetworkIndex, ObjectiveBreakdown, SupplyNetwork};
pub use oracles::{ExactOracle, MultiStageOracle, OracleResult, SingleStageOracle, ValueOracle};
pub use reference::{solve_exhaustive, ReferenceSolution};
