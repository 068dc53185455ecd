//! The scheduler loop's state: the master, its durable event log and the
//! in-process agents that run submitted jobs.
//!
//! Everything here is single-threaded and takes the current time as an
//! argument; the network layer decides when to call in.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};

use metasched_core::events::LogRecord;
use metasched_core::nat::NatError;
use metasched_core::sim::{compute_metrics, ClusterTemplate};
use metasched_core::snapshot::{read_log, read_snapshot, recover, write_snapshot, PersistError};
use metasched_core::{
    AgentId, ClusterId, Endpoint, JobId, JobSpec, JobState, Master, MasterError, Outcome,
    Reachability, ResourceVector, TenantId, Timestamp,
};
use serde_json::{json, Value};

use crate::config::ServiceConfig;
use crate::wire::{MsgType, WireMessage};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot listen on {addr}: {source}")]
    BindFailed {
        addr: String,
        source: std::io::Error,
    },
    #[error("event log is corrupt at line {line}: {message}")]
    LogCorrupt { line: usize, message: String },
    #[error(transparent)]
    Persist(PersistError),
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<PersistError> for ServiceError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::LogCorrupt { line, message } => ServiceError::LogCorrupt { line, message },
            PersistError::Io(io) => ServiceError::Io(io),
            other => ServiceError::Persist(other),
        }
    }
}

/// A configured agent and the registration currently standing for it.
#[derive(Debug, Clone)]
struct Slot {
    cluster_id: ClusterId,
    endpoint: Endpoint,
    total: ResourceVector,
    reachability: Reachability,
    agent_id: Option<AgentId>,
}

pub struct Service {
    config: ServiceConfig,
    master: Master,
    history: Vec<LogRecord>,
    log: BufWriter<File>,
    since_snapshot: u64,
    slots: Vec<Slot>,
    next_heartbeat: Timestamp,
}

impl Service {
    /// Restores from the snapshot and event log, or starts fresh and
    /// registers the configured agents when both are absent.
    pub fn open(config: ServiceConfig, now: Timestamp) -> Result<Service, ServiceError> {
        let snapshot = read_snapshot(&config.snapshot_path)?;
        let history = read_log(&config.event_log_path)?;
        let covered = snapshot.as_ref().map_or(0, |m| m.events_applied());
        let master = recover(config.master_config(), snapshot, &history)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&config.event_log_path)?;
        let slots = slots(&config.clusters);
        let now = now.max(master.clock());
        let mut svc = Service {
            since_snapshot: history.len() as u64 - covered,
            config,
            master,
            history,
            log: BufWriter::new(log),
            slots,
            next_heartbeat: now,
        };
        if svc.master.events_applied() == 0 {
            for c in svc.config.clusters.clone() {
                let name = c.display_name.clone().unwrap_or_else(|| c.cluster_id.to_string());
                svc.master.define_cluster(c.cluster_id, name, now)?;
            }
            for i in 0..svc.slots.len() {
                svc.register(i, now)?;
            }
            svc.persist()?;
        } else {
            svc.rebind();
        }
        Ok(svc)
    }

    pub fn master(&self) -> &Master {
        &self.master
    }

    /// Every event recorded so far, oldest first.
    pub fn history(&self) -> &[LogRecord] {
        &self.history
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Latest registrations for restored agents, matched by internal endpoint.
    fn rebind(&mut self) {
        for slot in &mut self.slots {
            slot.agent_id = self
                .master
                .agents()
                .filter(|a| a.cluster_id == slot.cluster_id)
                .filter(|a| match a.mapping_id {
                    Some(m) => self.master.gateway().mapping(m).map(|m| m.agent_internal) == Some(slot.endpoint),
                    None => a.endpoint == slot.endpoint,
                })
                .map(|a| a.agent_id)
                .max();
        }
    }

    fn register(&mut self, i: usize, now: Timestamp) -> Result<(), ServiceError> {
        let s = &self.slots[i];
        let result = match s.reachability {
            Reachability::Public => {
                self.master
                    .register_agent(s.cluster_id.clone(), s.endpoint, s.total, s.reachability, now)
            }
            Reachability::PrivateViaNat => self
                .master
                .register_private_agent(s.cluster_id.clone(), s.endpoint, s.total, now)
                .map(|(id, _)| id),
        };
        match result {
            Ok(id) => self.slots[i].agent_id = Some(id),
            // Gateway disabled or out of ports: the agent stays unregistered.
            Err(MasterError::Nat(_)) => self.slots[i].agent_id = None,
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn clamp(&self, now: Timestamp) -> Timestamp {
        now.max(self.master.clock())
    }

    /// One scheduling round: finish due work, heartbeat agents, then tick.
    pub fn tick(&mut self, now: Timestamp) -> Result<(), ServiceError> {
        let now = self.clamp(now);
        let due: Vec<JobId> = self
            .master
            .jobs()
            .filter(|j| j.state == JobState::Running)
            .filter(|j| j.t_start.is_some_and(|t| t + j.spec.est_duration_s <= now))
            .map(|j| j.job_id)
            .collect();
        for job in due {
            self.master.complete_task(job, Outcome::Finished, now)?;
        }
        if now >= self.next_heartbeat {
            for i in 0..self.slots.len() {
                match self.slots[i].agent_id {
                    Some(id) => match self.master.heartbeat(id, now) {
                        Ok(_) => {}
                        Err(MasterError::Nat(NatError::MappingNotFound)) => self.register(i, now)?,
                        Err(e) => return Err(e.into()),
                    },
                    None => self.register(i, now)?,
                }
            }
            self.next_heartbeat = now + self.config.heartbeat_period_s;
        }
        self.master.tick(now)?;
        self.persist()
    }

    /// Answers one request. `Err` means the event log could not be
    /// written; the reply is then unknown to the caller.
    pub fn handle(&mut self, msg: &WireMessage, now: Timestamp) -> Result<WireMessage, ServiceError> {
        let now = self.clamp(now);
        let reply = match self.dispatch(msg, now) {
            Ok(v) => WireMessage::ok(&msg.request_id, v),
            Err(Reply::BadRequest(m)) => WireMessage::error(&msg.request_id, "bad_request", m),
            Err(Reply::Master(e)) if e.is_user_error() => WireMessage::error(&msg.request_id, e.code(), &e),
            Err(Reply::Master(e)) => WireMessage::error(&msg.request_id, "internal", &e),
            Err(Reply::Internal(m)) => WireMessage::error(&msg.request_id, "internal", m),
        };
        self.persist()?;
        Ok(reply)
    }

    fn dispatch(&mut self, msg: &WireMessage, now: Timestamp) -> Result<Value, Reply> {
        let p = &msg.payload;
        match msg.kind {
            MsgType::Submit => {
                let spec: JobSpec = serde_json::from_value(Value::Object(p.clone()))
                    .map_err(|e| Reply::BadRequest(format!("invalid job spec: {e}")))?;
                let receipt = self.master.submit_job(spec, now)?;
                Ok(json!(receipt))
            }
            MsgType::Status => {
                let job = self.master.job_status(job_id(p)?)?;
                Ok(json!({ "job": job }))
            }
            MsgType::Cancel => {
                let job = self.master.cancel_job(job_id(p)?, now)?;
                Ok(json!({ "job": job }))
            }
            MsgType::ListJobs => {
                let tenant = match p.get("tenant_id") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(t)) => Some(TenantId::new(t.as_str())),
                    Some(_) => return Err(Reply::BadRequest("`tenant_id` must be a string".into())),
                };
                let jobs: Vec<_> = self
                    .master
                    .jobs()
                    .filter(|j| tenant.as_ref().is_none_or(|t| &j.spec.tenant_id == t))
                    .collect();
                Ok(json!({ "jobs": jobs }))
            }
            MsgType::Clusters => Ok(json!({ "clusters": self.master.clusters() })),
            MsgType::Agents => Ok(json!({ "agents": self.master.agents().collect::<Vec<_>>() })),
            MsgType::Offers => Ok(json!({ "offers": self.master.offers().collect::<Vec<_>>() })),
            MsgType::Metrics => {
                let metrics = compute_metrics(&self.history).map_err(|e| Reply::Internal(e.to_string()))?;
                Ok(json!({ "metrics": metrics }))
            }
            MsgType::Ok | MsgType::Error => {
                Err(Reply::BadRequest(format!("{} is a reply, not a request", msg.kind)))
            }
        }
    }

    /// Appends new events to the log and snapshots when due.
    fn persist(&mut self) -> Result<(), ServiceError> {
        let fresh = self.master.drain_journal();
        if fresh.is_empty() {
            return Ok(());
        }
        for r in &fresh {
            self.log.write_all(r.to_line().as_bytes())?;
            self.log.write_all(b"\n")?;
        }
        self.log.flush()?;
        self.since_snapshot += fresh.len() as u64;
        self.history.extend(fresh);
        if self.since_snapshot >= self.config.snapshot_every {
            self.log.get_ref().sync_data()?;
            write_snapshot(&self.config.snapshot_path, &self.master)?;
            self.since_snapshot = 0;
        }
        Ok(())
    }
}

enum Reply {
    BadRequest(String),
    Master(MasterError),
    Internal(String),
}

impl From<MasterError> for Reply {
    fn from(e: MasterError) -> Self {
        Reply::Master(e)
    }
}

fn job_id(p: &serde_json::Map<String, Value>) -> Result<JobId, Reply> {
    match p.get("job_id") {
        Some(Value::String(s)) => parse_job_id(s).ok_or_else(|| Reply::BadRequest(format!("malformed job id {s:?}"))),
        Some(Value::Number(n)) => n
            .as_u64()
            .map(JobId)
            .ok_or_else(|| Reply::BadRequest(format!("malformed job id {n}"))),
        _ => Err(Reply::BadRequest("missing `job_id`".into())),
    }
}

/// Accepts the canonical `job-00000042` form or a bare number.
pub fn parse_job_id(s: &str) -> Option<JobId> {
    s.parse().ok().or_else(|| s.parse::<u64>().ok().map(JobId))
}

/// Expands cluster templates into agent slots with stable endpoints.
fn slots(clusters: &[ClusterTemplate]) -> Vec<Slot> {
    let mut out = Vec::new();
    for (ci, c) in clusters.iter().enumerate() {
        let mut index = 0;
        for t in &c.agents {
            for _ in 0..t.count {
                let host = match t.reachability {
                    Reachability::Public => format!("198.51.{}.{}", ci + 1, index + 1),
                    Reachability::PrivateViaNat => format!("10.{}.0.{}", ci + 1, index + 1),
                };
                out.push(Slot {
                    cluster_id: c.cluster_id.clone(),
                    endpoint: Endpoint::parse(&host, 5051).expect("generated endpoints are valid"),
                    total: t.total,
                    reachability: t.reachability,
                    agent_id: None,
                });
                index += 1;
            }
        }
    }
    out
}
