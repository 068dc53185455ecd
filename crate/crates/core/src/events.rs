//! The event log: one record per state change.
//!
//! Records serialize as `{"t": seconds, "kind": ..., "payload": {...}}`, one
//! per line. The same format is the live audit trail, the persistence log and
//! the simulation trace.

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, ClusterId, JobId, MappingId, OfferId, TenantId};
use crate::model::{JobRecord, Timestamp};
use crate::nat::NatMapping;
use crate::offers::{AgentRecord, Offer};
use crate::policy::Reservation;
use crate::resources::ResourceVector;
use crate::scheduler::{ClusterVerdict, RoutingDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Finished,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReason {
    HeartbeatTimeout,
    LeaseExpired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Event {
    ClusterDefined {
        cluster_id: ClusterId,
        display_name: String,
        limit: u32,
    },
    TenantRegistered {
        tenant_id: TenantId,
        weight: f64,
    },
    AgentRegistered {
        agent: AgentRecord,
    },
    AgentHeartbeat {
        agent_id: AgentId,
    },
    AgentLost {
        agent_id: AgentId,
        reason: LossReason,
    },
    AgentReactivated {
        agent_id: AgentId,
    },
    NatMapped {
        mapping: NatMapping,
    },
    NatRenewed {
        mapping_id: MappingId,
        lease_expires_at: Timestamp,
    },
    NatExpired {
        mapping_id: MappingId,
    },
    NatChannel {
        mapping_id: MappingId,
        up: bool,
    },
    OfferIssued {
        offer: Offer,
    },
    OfferAccepted {
        offer_id: OfferId,
        used: ResourceVector,
    },
    OfferDeclined {
        offer_id: OfferId,
        filter_until: Timestamp,
    },
    OfferExpired {
        offer_id: OfferId,
    },
    OfferRescinded {
        offer_id: OfferId,
    },
    JobSubmitted {
        job: JobRecord,
    },
    JobQueued {
        job_id: JobId,
        decision: RoutingDecision,
    },
    JobParked {
        job_id: JobId,
        considered: Vec<ClusterVerdict>,
    },
    JobLaunched {
        job_id: JobId,
        offer_id: OfferId,
        agent_id: AgentId,
        cluster_id: ClusterId,
        request: ResourceVector,
        /// When the agent is expected to report the task running; absent if
        /// the launch could not be delivered.
        running_at: Option<Timestamp>,
    },
    JobRunning {
        job_id: JobId,
    },
    JobCompleted {
        job_id: JobId,
        agent_id: AgentId,
        outcome: Outcome,
        duration_s: u64,
    },
    JobLost {
        job_id: JobId,
        agent_id: AgentId,
    },
    JobRequeued {
        job_id: JobId,
    },
    /// Lost too many times; gives up with FAILED.
    JobAbandoned {
        job_id: JobId,
    },
    JobCancelled {
        job_id: JobId,
    },
    LedgerDecayed {},
    ReservationSet {
        reservation: Reservation,
    },
    ReservationCleared {
        cluster_id: ClusterId,
    },
    /// End of a simulation run; fixes the metrics horizon.
    ClockStopped {},
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::ClusterDefined { .. } => "cluster_defined",
            Event::TenantRegistered { .. } => "tenant_registered",
            Event::AgentRegistered { .. } => "agent_registered",
            Event::AgentHeartbeat { .. } => "agent_heartbeat",
            Event::AgentLost { .. } => "agent_lost",
            Event::AgentReactivated { .. } => "agent_reactivated",
            Event::NatMapped { .. } => "nat_mapped",
            Event::NatRenewed { .. } => "nat_renewed",
            Event::NatExpired { .. } => "nat_expired",
            Event::NatChannel { .. } => "nat_channel",
            Event::OfferIssued { .. } => "offer_issued",
            Event::OfferAccepted { .. } => "offer_accepted",
            Event::OfferDeclined { .. } => "offer_declined",
            Event::OfferExpired { .. } => "offer_expired",
            Event::OfferRescinded { .. } => "offer_rescinded",
            Event::JobSubmitted { .. } => "job_submitted",
            Event::JobQueued { .. } => "job_queued",
            Event::JobParked { .. } => "job_parked",
            Event::JobLaunched { .. } => "job_launched",
            Event::JobRunning { .. } => "job_running",
            Event::JobCompleted { .. } => "job_completed",
            Event::JobLost { .. } => "job_lost",
            Event::JobRequeued { .. } => "job_requeued",
            Event::JobAbandoned { .. } => "job_abandoned",
            Event::JobCancelled { .. } => "job_cancelled",
            Event::LedgerDecayed {} => "ledger_decayed",
            Event::ReservationSet { .. } => "reservation_set",
            Event::ReservationCleared { .. } => "reservation_cleared",
            Event::ClockStopped {} => "clock_stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: Timestamp,
    #[serde(flatten)]
    pub event: Event,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log records always serialize")
    }

    pub fn from_line(line: &str) -> Result<LogRecord, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Serializes records as JSON lines (LF-terminated).
pub fn to_json_lines(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct MalformedLog {
    pub line: usize,
    pub message: String,
}

/// Parses JSON lines, stopping at the first malformed record. Blank lines
/// are skipped; line numbers are 1-based.
pub fn parse_json_lines(text: &str) -> Result<Vec<LogRecord>, MalformedLog> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = LogRecord::from_line(line).map_err(|e| MalformedLog {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Hex SHA-256 over the JSON-lines encoding.
pub fn trace_hash(records: &[LogRecord]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.to_line().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}
