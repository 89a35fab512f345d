//! Traffic networks as routed flows between road elements, with a
//! sliding-window action learner and a receding-horizon boundary controller.

pub mod cli;
pub mod constraints;
pub mod dynamics;
pub mod learning;
pub mod mpc;
pub mod network;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod tendency;
pub mod trace;

pub use constraints::{FeasibilitySpec, ViolationReport};
pub use dynamics::{BoundaryInflow, NetworkModel, TrafficState};
pub use mpc::{MpcConfig, MpcController};
pub use network::{NodeId, NoirGraph};
pub use scenario::{Scenario, ScenarioDocument};
pub use sim::{run, summarize, RunTrace, Summary};
pub use tendency::{ActionId, ActionSet, TendencyAction};
