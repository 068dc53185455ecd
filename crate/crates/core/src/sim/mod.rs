//! Deterministic discrete-event simulation of the meta-scheduler.

pub mod audit;
pub mod compare;
pub mod harness;
pub mod metrics;
pub mod paired;
pub mod rng;
pub mod workload;

pub use audit::{audit_trace, AuditReport};
pub use compare::{compare_policies, ComparisonReport, NamedPolicy};
pub use harness::{
    run_simulation, AgentTemplate, ClusterTemplate, SimConfig, SimError, SimOutcome, SimReport,
    Simulation, Workload,
};
pub use metrics::{compute_metrics, Metrics, TraceMalformed, WaitStats};
pub use paired::{check_head_delay, HeadCheck, HeadDelayReport};
pub use workload::{generate_workload, Arrival, Burst, ScriptedJob, WorkloadParams};
