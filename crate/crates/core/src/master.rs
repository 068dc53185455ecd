//! The master: a single owner for every piece of scheduler state.
//!
//! All mutation goes through [`Master::emit`], which applies an [`Event`] and
//! appends it to the in-memory journal. Operations validate first and only
//! then emit, so replaying a journal through [`Master::apply`] rebuilds the
//! exact same state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::MasterError;
use crate::events::{Event, LogRecord, Outcome};
use crate::ids::{AgentId, ClusterId, JobId, OfferId, TenantId};
use crate::model::{JobRecord, JobState, Lifecycle, TenantAccount, Timestamp};
use crate::nat::{NatConfig, NatGateway};
use crate::offers::{AgentRecord, Liveness, Offer};
use crate::policy::{PolicyConfig, Reservation, UsageLedger};

pub const DEFAULT_OFFER_TTL_S: u64 = 5;
pub const DEFAULT_LIVENESS_TIMEOUT_S: u64 = 30;
pub const DEFAULT_MAX_REQUEUES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterConfig {
    #[serde(default = "default_offer_ttl")]
    pub offer_ttl_s: u64,
    #[serde(default = "default_liveness")]
    pub liveness_timeout_s: u64,
    #[serde(default = "default_requeues")]
    pub max_requeues: u32,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub nat: NatConfig,
}

fn default_offer_ttl() -> u64 {
    DEFAULT_OFFER_TTL_S
}

fn default_liveness() -> u64 {
    DEFAULT_LIVENESS_TIMEOUT_S
}

fn default_requeues() -> u32 {
    DEFAULT_MAX_REQUEUES
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            offer_ttl_s: DEFAULT_OFFER_TTL_S,
            liveness_timeout_s: DEFAULT_LIVENESS_TIMEOUT_S,
            max_requeues: DEFAULT_MAX_REQUEUES,
            policy: PolicyConfig::default(),
            nat: NatConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub display_name: String,
    pub limit: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("cannot apply {kind} at t={t}: {reason}")]
pub struct ApplyError {
    pub t: Timestamp,
    pub kind: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Master {
    pub(crate) config: MasterConfig,
    pub(crate) clusters: BTreeMap<ClusterId, ClusterInfo>,
    pub(crate) tenants: BTreeMap<TenantId, TenantAccount>,
    pub(crate) agents: BTreeMap<AgentId, AgentRecord>,
    pub(crate) offers: BTreeMap<OfferId, Offer>,
    /// Declined-offer filters: agent → tenant → filtered until (exclusive).
    pub(crate) filters: BTreeMap<AgentId, BTreeMap<TenantId, Timestamp>>,
    pub(crate) gateway: NatGateway,
    pub(crate) jobs: BTreeMap<JobId, JobRecord>,
    /// Jobs every cluster refused on limits, oldest first.
    pub(crate) overflow: Vec<JobId>,
    /// QUEUED jobs per cluster in service order.
    pub(crate) queued: BTreeMap<ClusterId, BTreeSet<(Timestamp, JobId)>>,
    /// LAUNCHED and RUNNING jobs per agent.
    pub(crate) placed: BTreeMap<AgentId, BTreeSet<JobId>>,
    /// LAUNCHED jobs waiting for the agent to report RUNNING.
    pub(crate) pending_starts: BTreeMap<JobId, Timestamp>,
    pub(crate) reservations: BTreeMap<ClusterId, Reservation>,
    pub(crate) ledger: UsageLedger,
    pub(crate) next_job: u64,
    pub(crate) next_agent: u64,
    pub(crate) next_offer: u64,
    pub(crate) clock: Timestamp,
    pub(crate) events_applied: u64,
    #[serde(skip)]
    pub(crate) journal: Vec<LogRecord>,
    /// Paired-run support: once this job receives a reservation, backfilling
    /// is switched off for the rest of the run.
    #[serde(skip)]
    pub(crate) backfill_cutover: Option<JobId>,
}

impl Master {
    pub fn new(config: MasterConfig) -> Result<Master, MasterError> {
        config.policy.validate()?;
        if config.offer_ttl_s == 0 || config.liveness_timeout_s == 0 {
            return Err(MasterError::InvalidConfig(
                "offer_ttl_s and liveness_timeout_s must be positive".into(),
            ));
        }
        let gateway = NatGateway::new(config.nat.clone())?;
        let ledger = UsageLedger::new(config.policy.half_life_s);
        Ok(Master {
            config,
            clusters: BTreeMap::new(),
            tenants: BTreeMap::new(),
            agents: BTreeMap::new(),
            offers: BTreeMap::new(),
            filters: BTreeMap::new(),
            gateway,
            jobs: BTreeMap::new(),
            overflow: Vec::new(),
            queued: BTreeMap::new(),
            placed: BTreeMap::new(),
            pending_starts: BTreeMap::new(),
            reservations: BTreeMap::new(),
            ledger,
            next_job: 1,
            next_agent: 1,
            next_offer: 1,
            clock: 0,
            events_applied: 0,
            journal: Vec::new(),
            backfill_cutover: None,
        })
    }

    pub fn config(&self) -> &MasterConfig {
        &self.config
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    /// Number of events applied since the pristine state.
    pub fn events_applied(&self) -> u64 {
        self.events_applied
    }

    pub fn gateway(&self) -> &NatGateway {
        &self.gateway
    }

    pub fn gateway_mut(&mut self) -> &mut NatGateway {
        &mut self.gateway
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn tenants(&self) -> impl Iterator<Item = &TenantAccount> {
        self.tenants.values()
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    pub fn agent(&self, id: AgentId) -> Option<&AgentRecord> {
        self.agents.get(&id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentRecord> {
        self.agents.values()
    }

    pub fn offers(&self) -> impl Iterator<Item = &Offer> {
        self.offers.values()
    }

    pub fn reservations(&self) -> impl Iterator<Item = &Reservation> {
        self.reservations.values()
    }

    pub fn overflow(&self) -> &[JobId] {
        &self.overflow
    }

    /// Takes everything emitted since the last drain.
    pub fn drain_journal(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.journal)
    }

    pub fn journal(&self) -> &[LogRecord] {
        &self.journal
    }

    /// Makes the run fall back to in-order service the moment `job`
    /// receives a reservation. Used to build paired no-backfill runs from a
    /// shared prefix.
    pub fn set_backfill_cutover(&mut self, job: JobId) {
        self.backfill_cutover = Some(job);
    }

    /// Marks the end of a run.
    pub fn stop_clock(&mut self, now: Timestamp) -> Result<(), MasterError> {
        self.check_clock(now)?;
        self.emit(now, Event::ClockStopped {});
        Ok(())
    }

    /// Applies an already-validated event and journals it.
    pub(crate) fn emit(&mut self, t: Timestamp, event: Event) {
        if let Err(err) = self.apply(t, &event) {
            panic!("validated event failed to apply: {err}");
        }
        self.journal.push(LogRecord { t, event });
    }

    /// Replays one record. Does not journal.
    pub fn apply_record(&mut self, record: &LogRecord) -> Result<(), ApplyError> {
        self.apply(record.t, &record.event)
    }

    fn transition(&mut self, id: JobId, step: Lifecycle, t: Timestamp) -> Result<JobState, String> {
        let job = self
            .jobs
            .get(&id)
            .ok_or_else(|| format!("unknown job {id}"))?
            .clone();
        let next = job.advance(step, t).map_err(|e| e.to_string())?;
        self.unindex(&job);
        self.ledger.note_transition(
            &next.spec.tenant_id,
            next.cluster_id.as_ref(),
            Some(job.state),
            next.state,
        );
        self.index(&next);
        let state = next.state;
        self.jobs.insert(id, next);
        Ok(state)
    }

    fn index(&mut self, job: &JobRecord) {
        match (job.state, &job.cluster_id, job.agent_id) {
            (JobState::Queued, Some(c), _) => {
                self.queued
                    .entry(c.clone())
                    .or_default()
                    .insert((job.t_submit.unwrap_or(0), job.job_id));
            }
            (s, _, Some(a)) if s.holds_allocation() => {
                self.placed.entry(a).or_default().insert(job.job_id);
            }
            _ => {}
        }
    }

    fn unindex(&mut self, job: &JobRecord) {
        if let Some(c) = &job.cluster_id {
            if let Some(q) = self.queued.get_mut(c) {
                q.remove(&(job.t_submit.unwrap_or(0), job.job_id));
                if q.is_empty() {
                    self.queued.remove(c);
                }
            }
        }
        if let Some(a) = job.agent_id {
            if let Some(p) = self.placed.get_mut(&a) {
                p.remove(&job.job_id);
                if p.is_empty() {
                    self.placed.remove(&a);
                }
            }
        }
    }

    fn agent_mut(&mut self, id: AgentId) -> Result<&mut AgentRecord, String> {
        self.agents
            .get_mut(&id)
            .ok_or_else(|| format!("unknown agent {id}"))
    }

    pub fn apply(&mut self, t: Timestamp, event: &Event) -> Result<(), ApplyError> {
        if t < self.clock {
            return Err(ApplyError {
                t,
                kind: event.kind(),
                reason: format!("clock went backwards from {}", self.clock),
            });
        }
        self.apply_inner(t, event).map_err(|reason| ApplyError {
            t,
            kind: event.kind(),
            reason,
        })?;
        self.clock = t;
        self.events_applied += 1;
        Ok(())
    }

    fn apply_inner(&mut self, t: Timestamp, event: &Event) -> Result<(), String> {
        match event {
            Event::ClusterDefined {
                cluster_id,
                display_name,
                limit,
            } => {
                self.clusters.insert(
                    cluster_id.clone(),
                    ClusterInfo {
                        display_name: display_name.clone(),
                        limit: *limit,
                    },
                );
            }
            Event::TenantRegistered { tenant_id, weight } => {
                let account = TenantAccount::new(tenant_id.clone(), *weight)
                    .ok_or_else(|| format!("bad weight {weight}"))?;
                self.tenants.insert(tenant_id.clone(), account);
                self.ledger.ensure_tenant(tenant_id);
            }
            Event::AgentRegistered { agent } => {
                self.next_agent = self.next_agent.max(agent.agent_id.0 + 1);
                self.agents.insert(agent.agent_id, agent.clone());
            }
            Event::AgentHeartbeat { agent_id } => {
                self.agent_mut(*agent_id)?.last_heartbeat = t;
            }
            Event::AgentLost { agent_id, .. } => {
                self.agent_mut(*agent_id)?.liveness = Liveness::Lost;
            }
            Event::AgentReactivated { agent_id } => {
                let agent = self.agent_mut(*agent_id)?;
                agent.liveness = Liveness::Active;
                agent.last_heartbeat = t;
            }
            Event::NatMapped { mapping } => self.gateway.apply_mapped(mapping),
            Event::NatRenewed {
                mapping_id,
                lease_expires_at,
            } => self.gateway.apply_renewed(*mapping_id, *lease_expires_at),
            Event::NatExpired { mapping_id } => self.gateway.apply_expired(*mapping_id),
            Event::NatChannel { mapping_id, up } => self.gateway.apply_channel(*mapping_id, *up),
            Event::OfferIssued { offer } => {
                self.next_offer = self.next_offer.max(offer.offer_id.0 + 1);
                self.offers.insert(offer.offer_id, offer.clone());
            }
            Event::OfferAccepted { offer_id, .. }
            | Event::OfferExpired { offer_id }
            | Event::OfferRescinded { offer_id } => {
                self.offers
                    .remove(offer_id)
                    .ok_or_else(|| format!("unknown offer {offer_id}"))?;
            }
            Event::OfferDeclined {
                offer_id,
                filter_until,
            } => {
                let offer = self
                    .offers
                    .remove(offer_id)
                    .ok_or_else(|| format!("unknown offer {offer_id}"))?;
                let per_agent = self.filters.entry(offer.agent_id).or_default();
                if *filter_until > t {
                    per_agent.insert(offer.tenant_id, *filter_until);
                } else {
                    per_agent.remove(&offer.tenant_id);
                }
                per_agent.retain(|_, until| *until > t);
                if per_agent.is_empty() {
                    self.filters.remove(&offer.agent_id);
                }
            }
            Event::JobSubmitted { job } => {
                if self.jobs.contains_key(&job.job_id) {
                    return Err(format!("duplicate job {}", job.job_id));
                }
                self.next_job = self.next_job.max(job.job_id.0 + 1);
                self.ledger.ensure_tenant(&job.spec.tenant_id);
                self.jobs.insert(job.job_id, job.clone());
            }
            Event::JobQueued { job_id, decision } => {
                self.transition(
                    *job_id,
                    Lifecycle::Queued {
                        cluster_id: decision.chosen_cluster.clone(),
                    },
                    t,
                )?;
                self.overflow.retain(|j| j != job_id);
            }
            Event::JobParked { job_id, .. } => {
                if !self.overflow.contains(job_id) {
                    self.overflow.push(*job_id);
                }
            }
            Event::JobLaunched {
                job_id,
                agent_id,
                cluster_id,
                request,
                running_at,
                ..
            } => {
                let agent = self.agent_mut(*agent_id)?;
                agent.allocated = agent
                    .allocated
                    .checked_add(request)
                    .map_err(|e| e.to_string())?;
                if !agent.allocated.fits(&agent.total) {
                    return Err(format!("agent {agent_id} over-allocated"));
                }
                self.transition(
                    *job_id,
                    Lifecycle::Launched {
                        agent_id: *agent_id,
                        cluster_id: cluster_id.clone(),
                    },
                    t,
                )?;
                if let Some(at) = running_at {
                    if *at > t {
                        self.pending_starts.insert(*job_id, *at);
                    }
                }
            }
            Event::JobRunning { job_id } => {
                self.transition(*job_id, Lifecycle::Running, t)?;
                self.pending_starts.remove(job_id);
            }
            Event::JobCompleted {
                job_id,
                agent_id,
                outcome,
                duration_s,
            } => {
                let job = self.jobs.get(job_id).ok_or_else(|| format!("unknown job {job_id}"))?;
                let request = job.spec.request;
                let tenant = job.spec.tenant_id.clone();
                let agent = self.agent_mut(*agent_id)?;
                agent.allocated = agent
                    .allocated
                    .checked_sub(&request)
                    .map_err(|e| e.to_string())?;
                let step = match outcome {
                    Outcome::Finished => Lifecycle::Finished,
                    Outcome::Failed => Lifecycle::Failed,
                };
                self.transition(*job_id, step, t)?;
                self.ledger
                    .record_usage(&tenant, &request, *duration_s, t)
                    .map_err(|e| e.to_string())?;
            }
            Event::JobLost { job_id, agent_id } => {
                let request = self
                    .jobs
                    .get(job_id)
                    .ok_or_else(|| format!("unknown job {job_id}"))?
                    .spec
                    .request;
                let agent = self.agent_mut(*agent_id)?;
                agent.allocated = agent
                    .allocated
                    .checked_sub(&request)
                    .map_err(|e| e.to_string())?;
                self.transition(*job_id, Lifecycle::Lost, t)?;
                self.pending_starts.remove(job_id);
            }
            Event::JobRequeued { job_id } => {
                self.transition(*job_id, Lifecycle::Requeued, t)?;
            }
            Event::JobAbandoned { job_id } => {
                self.transition(*job_id, Lifecycle::Failed, t)?;
            }
            Event::JobCancelled { job_id } => {
                self.transition(*job_id, Lifecycle::Cancelled, t)?;
                self.overflow.retain(|j| j != job_id);
                self.reservations.retain(|_, r| r.job_id != *job_id);
            }
            Event::LedgerDecayed {} => {
                self.ledger.decay(t).map_err(|e| e.to_string())?;
            }
            Event::ReservationSet { reservation } => {
                self.reservations
                    .insert(reservation.cluster_id.clone(), reservation.clone());
            }
            Event::ReservationCleared { cluster_id } => {
                self.reservations.remove(cluster_id);
            }
            Event::ClockStopped {} => {}
        }
        Ok(())
    }

    /// Rebuilds a master from its config and a full event history.
    pub fn replay<'a>(
        config: MasterConfig,
        records: impl IntoIterator<Item = &'a LogRecord>,
    ) -> Result<Master, MasterError> {
        let mut master = Master::new(config)?;
        for r in records {
            master.apply_record(r)?;
        }
        Ok(master)
    }

    /// Canonical JSON form of the persistent state.
    pub fn state_json(&self) -> String {
        serde_json::to_string(self).expect("master state serializes")
    }
}
