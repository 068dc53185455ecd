//! Agent registry and the two-level offer protocol.
//!
//! The master offers an agent's whole free vector to one tenant at a time;
//! the tenant either accepts it with a set of launches or declines it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::MasterError;
use crate::events::{Event, LossReason, Outcome};
use crate::ids::{AgentId, ClusterId, JobId, MappingId, OfferId, TenantId};
use crate::master::{ClusterInfo, Master};
use crate::model::{Endpoint, JobRecord, JobState, Timestamp};
use crate::nat::NatMapping;
use crate::resources::ResourceVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reachability {
    Public,
    PrivateViaNat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Liveness {
    Active,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent_id: AgentId,
    pub cluster_id: ClusterId,
    /// The address the master uses; the gateway's public endpoint for
    /// private agents.
    pub endpoint: Endpoint,
    pub reachability: Reachability,
    pub total: ResourceVector,
    pub allocated: ResourceVector,
    pub liveness: Liveness,
    pub last_heartbeat: Timestamp,
    /// The gateway mapping behind `endpoint`, for private agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping_id: Option<MappingId>,
}

impl AgentRecord {
    pub fn free(&self) -> ResourceVector {
        self.total
            .checked_sub(&self.allocated)
            .expect("allocated never exceeds total")
    }

    pub fn is_active(&self) -> bool {
        self.liveness == Liveness::Active
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offer {
    pub offer_id: OfferId,
    pub agent_id: AgentId,
    pub cluster_id: ClusterId,
    pub tenant_id: TenantId,
    pub resources: ResourceVector,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchReceipt {
    pub job_id: JobId,
    pub agent_id: AgentId,
    pub cluster_id: ClusterId,
    pub endpoint: Endpoint,
    /// False when the launch could not be delivered to a private agent; the
    /// job then stays LAUNCHED until the agent is declared lost.
    pub delivered: bool,
}

/// Per-round offer bookkeeping local to one scheduling tick.
#[derive(Debug, Default)]
pub(crate) struct RoundState {
    /// (agent, tenant) pairs already declined this tick.
    pub declined: BTreeSet<(AgentId, TenantId)>,
}

impl Master {
    /// Defines a cluster explicitly. Registering an agent in an unknown
    /// cluster defines it implicitly with its id as display name.
    pub fn define_cluster(
        &mut self,
        cluster_id: ClusterId,
        display_name: impl Into<String>,
        now: Timestamp,
    ) -> Result<(), MasterError> {
        self.check_clock(now)?;
        let limit = self.config.policy.limit_for(&cluster_id);
        let display_name = display_name.into();
        let info = ClusterInfo {
            display_name: display_name.clone(),
            limit,
        };
        if self.clusters.get(&cluster_id) != Some(&info) {
            self.emit(
                now,
                Event::ClusterDefined {
                    cluster_id,
                    display_name,
                    limit,
                },
            );
        }
        Ok(())
    }

    pub(crate) fn check_clock(&self, now: Timestamp) -> Result<(), MasterError> {
        if now < self.clock {
            return Err(MasterError::Policy(
                crate::policy::PolicyError::ClockWentBackwards {
                    now,
                    last: self.clock,
                },
            ));
        }
        Ok(())
    }

    pub fn register_agent(
        &mut self,
        cluster_id: ClusterId,
        endpoint: Endpoint,
        total: ResourceVector,
        reachability: Reachability,
        now: Timestamp,
    ) -> Result<AgentId, MasterError> {
        self.check_clock(now)?;
        if !total.all_positive() {
            return Err(MasterError::InvalidCapacity(total));
        }
        if self
            .agents
            .values()
            .any(|a| a.is_active() && a.cluster_id == cluster_id && a.endpoint == endpoint)
        {
            return Err(MasterError::AlreadyRegistered {
                cluster_id,
                endpoint,
            });
        }
        let mapping_id = match reachability {
            Reachability::Public => None,
            Reachability::PrivateViaNat => {
                if !self.gateway.config().enabled {
                    return Err(crate::nat::NatError::Disabled.into());
                }
                let mapping = self
                    .gateway
                    .live_by_public(&endpoint)
                    .ok_or(crate::nat::NatError::MappingNotFound)?;
                Some(mapping.mapping_id)
            }
        };
        if !self.clusters.contains_key(&cluster_id) {
            self.define_cluster(cluster_id.clone(), cluster_id.as_str(), now)?;
        }
        let agent_id = AgentId(self.next_agent);
        self.emit(
            now,
            Event::AgentRegistered {
                agent: AgentRecord {
                    agent_id,
                    cluster_id,
                    endpoint,
                    reachability,
                    total,
                    allocated: ResourceVector::ZERO,
                    liveness: Liveness::Active,
                    last_heartbeat: now,
                    mapping_id,
                },
            },
        );
        Ok(agent_id)
    }

    /// Leases a public endpoint for `internal` on the gateway and registers
    /// the agent behind it.
    pub fn register_private_agent(
        &mut self,
        cluster_id: ClusterId,
        internal: Endpoint,
        total: ResourceVector,
        now: Timestamp,
    ) -> Result<(AgentId, NatMapping), MasterError> {
        self.check_clock(now)?;
        if !total.all_positive() {
            return Err(MasterError::InvalidCapacity(total));
        }
        let mapping = self.gateway.plan_register(internal, now)?;
        self.emit(
            now,
            Event::NatMapped {
                mapping: mapping.clone(),
            },
        );
        let agent_id = self.register_agent(
            cluster_id,
            mapping.public,
            total,
            Reachability::PrivateViaNat,
            now,
        )?;
        Ok((agent_id, mapping))
    }

    /// Records a heartbeat. Private agents also renew their NAT lease; a LOST
    /// agent comes back ACTIVE with nothing allocated, its tasks having
    /// already been requeued.
    pub fn heartbeat(&mut self, agent_id: AgentId, now: Timestamp) -> Result<Liveness, MasterError> {
        self.check_clock(now)?;
        let agent = self
            .agents
            .get(&agent_id)
            .ok_or(MasterError::UnknownAgent(agent_id))?;
        let was = agent.liveness;
        if let Some(mapping_id) = agent.mapping_id {
            let lease_expires_at = self.gateway.plan_renew(mapping_id, now)?;
            self.emit(
                now,
                Event::NatRenewed {
                    mapping_id,
                    lease_expires_at,
                },
            );
        }
        match was {
            Liveness::Active => self.emit(now, Event::AgentHeartbeat { agent_id }),
            Liveness::Lost => self.emit(now, Event::AgentReactivated { agent_id }),
        }
        Ok(Liveness::Active)
    }

    /// Marks a private agent's outbound channel up or down.
    pub fn set_channel(&mut self, agent_id: AgentId, up: bool, now: Timestamp) -> Result<(), MasterError> {
        self.check_clock(now)?;
        let agent = self
            .agents
            .get(&agent_id)
            .ok_or(MasterError::UnknownAgent(agent_id))?;
        let mapping_id = agent
            .mapping_id
            .ok_or(crate::nat::NatError::MappingNotFound)?;
        if self.gateway.mapping(mapping_id).is_none() {
            return Err(crate::nat::NatError::MappingNotFound.into());
        }
        self.emit(now, Event::NatChannel { mapping_id, up });
        Ok(())
    }

    /// Expires NAT leases, declares silent agents lost and drops stale offers.
    pub fn sweep(&mut self, now: Timestamp) -> Result<(), MasterError> {
        self.check_clock(now)?;
        for mapping_id in self.gateway.plan_sweep(now) {
            self.emit(now, Event::NatExpired { mapping_id });
            let victims: Vec<AgentId> = self
                .agents
                .values()
                .filter(|a| a.is_active() && a.mapping_id == Some(mapping_id))
                .map(|a| a.agent_id)
                .collect();
            for agent_id in victims {
                self.lose_agent(agent_id, LossReason::LeaseExpired, now);
            }
        }
        let timeout = self.config.liveness_timeout_s;
        let silent: Vec<AgentId> = self
            .agents
            .values()
            .filter(|a| a.is_active() && now.saturating_sub(a.last_heartbeat) > timeout)
            .map(|a| a.agent_id)
            .collect();
        for agent_id in silent {
            self.lose_agent(agent_id, LossReason::HeartbeatTimeout, now);
        }
        let stale: Vec<OfferId> = self
            .offers
            .values()
            .filter(|o| o.expires_at < now)
            .map(|o| o.offer_id)
            .collect();
        for offer_id in stale {
            self.emit(now, Event::OfferExpired { offer_id });
        }
        Ok(())
    }

    fn lose_agent(&mut self, agent_id: AgentId, reason: LossReason, now: Timestamp) {
        self.emit(now, Event::AgentLost { agent_id, reason });
        let outstanding: Vec<OfferId> = self
            .offers
            .values()
            .filter(|o| o.agent_id == agent_id)
            .map(|o| o.offer_id)
            .collect();
        for offer_id in outstanding {
            self.emit(now, Event::OfferRescinded { offer_id });
        }
        let jobs: Vec<JobId> = self
            .placed
            .get(&agent_id)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for job_id in jobs {
            self.emit(now, Event::JobLost { job_id, agent_id });
            if self.jobs[&job_id].requeues < self.config.max_requeues {
                self.emit(now, Event::JobRequeued { job_id });
            } else {
                self.emit(now, Event::JobAbandoned { job_id });
            }
        }
    }

    pub(crate) fn has_queued(&self, tenant: &TenantId, cluster: &ClusterId) -> bool {
        self.ledger
            .usage(tenant)
            .and_then(|u| u.queued_by_cluster.get(cluster))
            .is_some_and(|n| *n > 0)
    }

    fn filtered(&self, agent: AgentId, tenant: &TenantId, now: Timestamp) -> bool {
        self.filters
            .get(&agent)
            .and_then(|m| m.get(tenant))
            .is_some_and(|until| *until > now)
    }

    /// Issues one whole-free-vector offer per idle ACTIVE agent, addressed
    /// to the first tenant in `tenant_order` with a queued job at that
    /// agent's cluster.
    pub fn generate_offers(
        &mut self,
        tenant_order: &[TenantId],
        now: Timestamp,
    ) -> Result<Vec<Offer>, MasterError> {
        self.check_clock(now)?;
        Ok(self.generate_offers_with(|_| tenant_order, &RoundState::default(), now))
    }

    pub(crate) fn generate_offers_with<'a>(
        &mut self,
        order_for: impl Fn(&ClusterId) -> &'a [TenantId],
        round: &RoundState,
        now: Timestamp,
    ) -> Vec<Offer> {
        let busy: BTreeSet<AgentId> = self.offers.values().map(|o| o.agent_id).collect();
        let mut planned = Vec::new();
        for agent in self.agents.values() {
            if !agent.is_active() || busy.contains(&agent.agent_id) {
                continue;
            }
            let free = agent.free();
            if !free.any_positive() {
                continue;
            }
            let eligible = |tenant: &TenantId| {
                self.has_queued(tenant, &agent.cluster_id)
                    && !self.filtered(agent.agent_id, tenant, now)
                    && !round.declined.contains(&(agent.agent_id, tenant.clone()))
            };
            let holder = self
                .reservations
                .get(&agent.cluster_id)
                .filter(|r| r.agent_id == agent.agent_id && r.resources.fits(&free))
                .map(|r| self.jobs[&r.job_id].spec.tenant_id.clone())
                .filter(|t| eligible(t));
            let Some(tenant_id) =
                holder.or_else(|| order_for(&agent.cluster_id).iter().find(|t| eligible(t)).cloned())
            else {
                continue;
            };
            planned.push((agent.agent_id, agent.cluster_id.clone(), tenant_id, free));
        }
        let mut issued = Vec::with_capacity(planned.len());
        for (agent_id, cluster_id, tenant_id, resources) in planned {
            let offer = Offer {
                offer_id: OfferId(self.next_offer),
                agent_id,
                cluster_id,
                tenant_id,
                resources,
                issued_at: now,
                expires_at: now + self.config.offer_ttl_s,
            };
            self.emit(
                now,
                Event::OfferIssued {
                    offer: offer.clone(),
                },
            );
            issued.push(offer);
        }
        issued
    }

    fn live_offer(&mut self, offer_id: OfferId, now: Timestamp) -> Result<Offer, MasterError> {
        let offer = self
            .offers
            .get(&offer_id)
            .ok_or(MasterError::OfferNotFound(offer_id))?
            .clone();
        if now > offer.expires_at {
            self.emit(now, Event::OfferExpired { offer_id });
            return Err(MasterError::OfferExpired(offer_id));
        }
        Ok(offer)
    }

    /// Launches jobs against an offer. Either every launch is valid and all
    /// of them happen, or nothing changes (apart from expiring a stale
    /// offer).
    pub fn accept_offer(
        &mut self,
        offer_id: OfferId,
        launches: &[(JobId, ResourceVector)],
        now: Timestamp,
    ) -> Result<Vec<LaunchReceipt>, MasterError> {
        self.check_clock(now)?;
        let offer = self.live_offer(offer_id, now)?;
        let mut seen = BTreeSet::new();
        let mut used = ResourceVector::ZERO;
        for (job_id, request) in launches {
            let job = self.jobs.get(job_id).ok_or(MasterError::UnknownJob(*job_id))?;
            if job.state != JobState::Queued {
                return Err(MasterError::JobNotQueued(*job_id));
            }
            if job.spec.tenant_id != offer.tenant_id {
                return Err(MasterError::WrongTenant {
                    offer_id,
                    job_id: *job_id,
                    addressed: offer.tenant_id.clone(),
                });
            }
            if job.cluster_id.as_ref() != Some(&offer.cluster_id) {
                return Err(MasterError::InvalidLaunch(format!(
                    "{job_id} is queued at another cluster"
                )));
            }
            if *request != job.spec.request {
                return Err(MasterError::InvalidLaunch(format!(
                    "{job_id} requested {} but launch asks {request}",
                    job.spec.request
                )));
            }
            if !seen.insert(*job_id) {
                return Err(MasterError::InvalidLaunch(format!("{job_id} launched twice")));
            }
            used = used.checked_add(request)?;
        }
        if !used.fits(&offer.resources) {
            return Err(MasterError::OverSubscription {
                offered: offer.resources,
                requested: used,
            });
        }
        self.emit(now, Event::OfferAccepted { offer_id, used });
        let agent = self.agents[&offer.agent_id].clone();
        let mut receipts = Vec::with_capacity(launches.len());
        for (job_id, request) in launches {
            let delivered = self.deliver_launch(&agent, *job_id);
            let running_at = delivered.then(|| now + self.launch_latency(&agent));
            self.emit(
                now,
                Event::JobLaunched {
                    job_id: *job_id,
                    offer_id,
                    agent_id: agent.agent_id,
                    cluster_id: agent.cluster_id.clone(),
                    request: *request,
                    running_at,
                },
            );
            if running_at == Some(now) {
                self.emit(now, Event::JobRunning { job_id: *job_id });
            }
            receipts.push(LaunchReceipt {
                job_id: *job_id,
                agent_id: agent.agent_id,
                cluster_id: agent.cluster_id.clone(),
                endpoint: agent.endpoint,
                delivered,
            });
        }
        Ok(receipts)
    }

    fn launch_latency(&self, agent: &AgentRecord) -> u64 {
        match agent.reachability {
            Reachability::Public => 0,
            Reachability::PrivateViaNat => self.gateway.config().relay_latency_s,
        }
    }

    /// Sends the launch command to a private agent through the gateway.
    /// Public agents are reached directly.
    fn deliver_launch(&mut self, agent: &AgentRecord, job_id: JobId) -> bool {
        if agent.reachability == Reachability::Public {
            return true;
        }
        let job = &self.jobs[&job_id];
        let message = serde_json::json!({
            "type": "launch",
            "job_id": job_id,
            "command": job.spec.command,
            "request": job.spec.request,
        });
        let bytes = serde_json::to_vec(&message).expect("launch message serializes");
        self.gateway.relay(&agent.endpoint, &bytes).is_ok()
    }

    /// Declines an offer; the tenant gets no offers from that agent for
    /// `filter_s` seconds.
    pub fn decline_offer(
        &mut self,
        offer_id: OfferId,
        filter_s: u64,
        now: Timestamp,
    ) -> Result<(), MasterError> {
        self.check_clock(now)?;
        self.live_offer(offer_id, now)?;
        self.emit(
            now,
            Event::OfferDeclined {
                offer_id,
                filter_until: now + filter_s,
            },
        );
        Ok(())
    }

    /// Reports a task's end; releases its resources and charges its usage.
    pub fn complete_task(
        &mut self,
        job_id: JobId,
        outcome: Outcome,
        now: Timestamp,
    ) -> Result<JobRecord, MasterError> {
        self.check_clock(now)?;
        let job = self.jobs.get(&job_id).ok_or(MasterError::UnknownJob(job_id))?;
        if job.state != JobState::Running {
            return Err(MasterError::JobNotRunning(job_id));
        }
        let agent_id = job.agent_id.expect("running jobs have an agent");
        let duration_s = now - job.t_start.expect("running jobs have started");
        self.emit(
            now,
            Event::JobCompleted {
                job_id,
                agent_id,
                outcome,
                duration_s,
            },
        );
        Ok(self.jobs[&job_id].clone())
    }
}
