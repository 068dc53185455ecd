//! Jobs, endpoints and tenants, plus the job lifecycle state machine.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, ClusterId, JobId, TenantId};
use crate::resources::ResourceVector;

/// Seconds on the scheduler's monotone clock (virtual in simulation, offset
/// wall clock in service mode).
pub type Timestamp = u64;

/// A reachable IPv4 address and port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawEndpoint")]
pub struct Endpoint {
    pub host: Ipv4Addr,
    pub port: u16,
}

#[derive(Deserialize)]
struct RawEndpoint {
    host: String,
    port: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EndpointError {
    #[error("host {0:?} is not a dotted-quad IPv4 address")]
    BadHost(String),
    #[error("port {0} outside 1..=65535")]
    BadPort(u64),
    #[error("endpoint {0:?} is not host:port")]
    Malformed(String),
}

impl TryFrom<RawEndpoint> for Endpoint {
    type Error = EndpointError;

    fn try_from(raw: RawEndpoint) -> Result<Self, Self::Error> {
        Endpoint::parse(&raw.host, raw.port as u64)
    }
}

impl Endpoint {
    pub fn new(host: Ipv4Addr, port: u16) -> Result<Self, EndpointError> {
        if port == 0 {
            return Err(EndpointError::BadPort(0));
        }
        Ok(Endpoint { host, port })
    }

    pub fn parse(host: &str, port: u64) -> Result<Self, EndpointError> {
        let host: Ipv4Addr = host
            .parse()
            .map_err(|_| EndpointError::BadHost(host.to_string()))?;
        if !(1..=65535).contains(&port) {
            return Err(EndpointError::BadPort(port));
        }
        Ok(Endpoint {
            host,
            port: port as u16,
        })
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for Endpoint {
    type Err = EndpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| EndpointError::Malformed(s.to_string()))?;
        let port: u64 = port
            .parse()
            .map_err(|_| EndpointError::Malformed(s.to_string()))?;
        Endpoint::parse(host, port)
    }
}

/// What a tenant asks to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub tenant_id: TenantId,
    pub command: String,
    pub request: ResourceVector,
    /// User-supplied runtime estimate; backfilling relies on it.
    pub est_duration_s: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_affinity: Option<ClusterId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("request must have at least one positive component")]
    EmptyRequest,
    #[error("est_duration_s must be at least 1")]
    ZeroEstimate,
    #[error("tenant_id must not be empty")]
    EmptyTenant,
}

impl JobSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.tenant_id.as_str().is_empty() {
            return Err(SpecError::EmptyTenant);
        }
        if !self.request.any_positive() {
            return Err(SpecError::EmptyRequest);
        }
        if self.est_duration_s == 0 {
            return Err(SpecError::ZeroEstimate);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Submitted,
    Queued,
    Launched,
    Running,
    Finished,
    Failed,
    Lost,
    Cancelled,
}

impl JobState {
    pub const ALL: [JobState; 8] = [
        JobState::Submitted,
        JobState::Queued,
        JobState::Launched,
        JobState::Running,
        JobState::Finished,
        JobState::Failed,
        JobState::Lost,
        JobState::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Finished | JobState::Failed | JobState::Cancelled
        )
    }

    /// Counts against a tenant's per-cluster submission limit.
    pub fn is_active(self) -> bool {
        matches!(
            self,
            JobState::Queued | JobState::Launched | JobState::Running
        )
    }

    /// Holds resources on an agent.
    pub fn holds_allocation(self) -> bool {
        matches!(self, JobState::Launched | JobState::Running)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("state serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// Input to [`JobRecord::advance`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lifecycle {
    Queued { cluster_id: ClusterId },
    Launched { agent_id: AgentId, cluster_id: ClusterId },
    Running,
    Finished,
    Failed,
    Lost,
    Cancelled,
    Requeued,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LifecycleKind {
    Queued,
    Launched,
    Running,
    Finished,
    Failed,
    Lost,
    Cancelled,
    Requeued,
}

impl LifecycleKind {
    pub const ALL: [LifecycleKind; 8] = [
        LifecycleKind::Queued,
        LifecycleKind::Launched,
        LifecycleKind::Running,
        LifecycleKind::Finished,
        LifecycleKind::Failed,
        LifecycleKind::Lost,
        LifecycleKind::Cancelled,
        LifecycleKind::Requeued,
    ];
}

impl fmt::Display for LifecycleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LifecycleKind::Queued => "queued",
            LifecycleKind::Launched => "launched",
            LifecycleKind::Running => "running",
            LifecycleKind::Finished => "finished",
            LifecycleKind::Failed => "failed",
            LifecycleKind::Lost => "lost",
            LifecycleKind::Cancelled => "cancelled",
            LifecycleKind::Requeued => "requeued",
        };
        f.write_str(s)
    }
}

impl Lifecycle {
    pub fn kind(&self) -> LifecycleKind {
        match self {
            Lifecycle::Queued { .. } => LifecycleKind::Queued,
            Lifecycle::Launched { .. } => LifecycleKind::Launched,
            Lifecycle::Running => LifecycleKind::Running,
            Lifecycle::Finished => LifecycleKind::Finished,
            Lifecycle::Failed => LifecycleKind::Failed,
            Lifecycle::Lost => LifecycleKind::Lost,
            Lifecycle::Cancelled => LifecycleKind::Cancelled,
            Lifecycle::Requeued => LifecycleKind::Requeued,
        }
    }
}

/// The transition table. `None` means the edge does not exist.
///
/// LOST → FAILED is taken once a job has exhausted its requeue budget.
pub fn next_state(from: JobState, event: LifecycleKind) -> Option<JobState> {
    use JobState as S;
    use LifecycleKind as E;
    match (from, event) {
        (S::Submitted, E::Queued) => Some(S::Queued),
        (S::Submitted, E::Cancelled) => Some(S::Cancelled),
        (S::Queued, E::Launched) => Some(S::Launched),
        (S::Queued, E::Cancelled) => Some(S::Cancelled),
        (S::Launched, E::Running) => Some(S::Running),
        (S::Launched, E::Lost) => Some(S::Lost),
        (S::Running, E::Finished) => Some(S::Finished),
        (S::Running, E::Failed) => Some(S::Failed),
        (S::Running, E::Lost) => Some(S::Lost),
        (S::Lost, E::Requeued) => Some(S::Queued),
        (S::Lost, E::Failed) => Some(S::Failed),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("illegal transition: {event} from {state}")]
    IllegalTransition { state: JobState, event: LifecycleKind },
    #[error("event at t={now} precedes the job's last timestamp t={latest}")]
    ClockWentBackwards { now: Timestamp, latest: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: JobId,
    pub spec: JobSpec,
    pub state: JobState,
    pub cluster_id: Option<ClusterId>,
    pub agent_id: Option<AgentId>,
    pub t_submit: Option<Timestamp>,
    pub t_start: Option<Timestamp>,
    pub t_finish: Option<Timestamp>,
    /// Times this job went LOST and was put back in its queue.
    #[serde(default)]
    pub requeues: u32,
}

impl JobRecord {
    pub fn new(job_id: JobId, spec: JobSpec, now: Timestamp) -> Self {
        JobRecord {
            job_id,
            spec,
            state: JobState::Submitted,
            cluster_id: None,
            agent_id: None,
            t_submit: Some(now),
            t_start: None,
            t_finish: None,
            requeues: 0,
        }
    }

    fn latest_timestamp(&self) -> Timestamp {
        [self.t_submit, self.t_start, self.t_finish]
            .into_iter()
            .flatten()
            .max()
            .unwrap_or(0)
    }

    /// Applies one lifecycle event, returning the updated record.
    pub fn advance(&self, event: Lifecycle, now: Timestamp) -> Result<JobRecord, TransitionError> {
        let kind = event.kind();
        let state = next_state(self.state, kind).ok_or(TransitionError::IllegalTransition {
            state: self.state,
            event: kind,
        })?;
        let latest = self.latest_timestamp();
        if now < latest {
            return Err(TransitionError::ClockWentBackwards { now, latest });
        }
        let mut next = self.clone();
        next.state = state;
        match event {
            Lifecycle::Queued { cluster_id } => next.cluster_id = Some(cluster_id),
            Lifecycle::Launched {
                agent_id,
                cluster_id,
            } => {
                next.agent_id = Some(agent_id);
                next.cluster_id = Some(cluster_id);
            }
            Lifecycle::Running => next.t_start = Some(now),
            Lifecycle::Finished | Lifecycle::Failed | Lifecycle::Cancelled => {
                next.t_finish = Some(now)
            }
            Lifecycle::Lost => next.agent_id = None,
            Lifecycle::Requeued => {
                next.agent_id = None;
                next.t_start = None;
                next.requeues += 1;
            }
        }
        Ok(next)
    }
}

/// A tenant and its fair-share weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenantAccount {
    pub tenant_id: TenantId,
    pub weight: f64,
}

impl TenantAccount {
    pub fn new(tenant_id: TenantId, weight: f64) -> Option<Self> {
        (weight.is_finite() && weight > 0.0).then_some(TenantAccount { tenant_id, weight })
    }
}
