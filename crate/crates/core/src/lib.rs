//! Simulator for gradient tracking over directed graphs with asynchronous,
//! delayed activations.
//!
//! Modules, bottom up: [`graph`] (topology and mixing weights), [`oracle`]
//! (local objectives and stochastic gradients), [`scheduler`] (activations and
//! delays), [`protocol`] (agent state and the per-event update), [`metrics`]
//! (error terms and conservation audits), [`runner`] (experiments).

pub mod graph;
pub mod metrics;
pub mod oracle;
pub mod protocol;
pub mod runner;
pub mod scheduler;

pub use graph::{Digraph, MixingPair};
pub use metrics::MetricsSnapshot;
pub use oracle::{ObjectiveOracle, SampleDraw};
pub use protocol::{AgentState, Simulation};
pub use runner::{ExperimentConfig, RunError, StepSchedule, StepSpec};
pub use scheduler::{ActivationPolicy, DelayModel, ScheduleEvent, Scheduler};
