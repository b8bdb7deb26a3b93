//! Fault-tolerance planning and simulation for mixture-of-experts training:
//! partial-expert checkpoint schedules, sharded save plans, a two-level
//! checkpoint engine, and a deterministic fault-injecting simulator.

pub mod engine;
pub mod error;
pub mod planner;
pub mod scenario;
pub mod selector;
pub mod simulator;
pub mod topology;

pub use error::ValidationError;
pub use planner::{PecConfig, ShardPlan, Strategy};
pub use scenario::{Faults, Mode, Routing, Scenario, ScriptedFault};
pub use selector::Selection;
pub use simulator::{run, SimError, SimReport};
pub use topology::{ClusterSpec, ModelSpec, NonExpertModule, ParallelSpec, RankLayout};
