//! Multi-trip time-dependent vehicle routing: instances, the routing MDP, an
//! exact oracle, ACO/GA baselines and an attention policy trained with REINFORCE.

pub mod autodiff;
pub mod env;
pub mod error;
pub mod instance;
pub mod metaheuristics;
pub mod oracle;
pub mod policy;
pub mod report;
pub mod trainer;

pub use env::{Action, Solution, State, VehicleState};
pub use error::{Error, Result};
pub use instance::{FleetConfig, FleetPreset, GeneratorConfig, Instance, TimeIntervalSchedule};
pub use report::SolverReport;
pub use policy::{DecodeMode, PolicyDims, PolicyParams};
pub use trainer::{TrainConfig, TrainLogRow};
