//! A multi-cluster meta-scheduler.
//!
//! Agents from several clusters, including agents reachable only through a
//! NAT gateway, register with a single [`Master`]. Jobs are routed across
//! clusters under per-tenant submission limits and placed through a
//! two-level offer protocol ordered by weighted dominant-usage fair share,
//! with optional EASY backfilling. Every state change is an [`Event`], so
//! the same log drives persistence, audits and simulation metrics.

pub mod error;
pub mod events;
pub mod ids;
pub mod master;
pub mod model;
pub mod nat;
pub mod offers;
pub mod policy;
pub mod resources;
pub mod scheduler;
pub mod sim;
pub mod snapshot;

pub use error::MasterError;
pub use events::{Event, LogRecord, Outcome};
pub use ids::{AgentId, ClusterId, JobId, MappingId, OfferId, TenantId};
pub use master::{Master, MasterConfig};
pub use model::{Endpoint, JobRecord, JobSpec, JobState, Timestamp};
pub use offers::{AgentRecord, Liveness, Offer, Reachability};
pub use policy::{BackfillMode, PolicyConfig, TenantOrdering};
pub use resources::{Cpus, ResourceVector};
pub use scheduler::{RoutingDecision, Routing, SubmitReceipt};
