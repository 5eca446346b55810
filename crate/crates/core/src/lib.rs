//! Resource allocation in stochastic business processes: a continuous-time
//! simulator, rollout-based policy improvement, an exact solver for bounded
//! instances and an evaluation harness.

pub mod eval;
pub mod mdp;
pub mod model;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod rollout;
pub mod sim;
pub mod stats;

pub use model::{build_scenario, compose, ProcessModel, ScenarioKind, ScenarioSpec};
pub use policy::{Heuristic, Policy, PolicyNet};
pub use reward::RewardKind;
pub use rng::RngStream;
pub use sim::{Action, ActionMask, ExecutionState, Observation};
