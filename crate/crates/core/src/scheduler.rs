//! Admission, cross-cluster routing and the scheduling tick.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::MasterError;
use crate::events::{Event, LogRecord};
use crate::ids::{AgentId, ClusterId, JobId, TenantId};
use crate::master::Master;
use crate::model::{JobRecord, JobSpec, JobState, Timestamp};
use crate::offers::{Offer, RoundState};
use crate::policy::{
    earliest_start, fair_share_rank, BackfillMode, Release, Reservation, SubmissionLimit,
    TenantOrdering, Verdict,
};
use crate::resources::ResourceVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RouteReason {
    /// The job's preferred cluster admitted it.
    Affinity,
    /// The first cluster considered admitted it.
    LeastPressure,
    /// An earlier cluster refused and a later one admitted.
    Spillover,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterVerdict {
    pub cluster_id: ClusterId,
    #[serde(flatten)]
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub job_id: JobId,
    pub chosen_cluster: ClusterId,
    pub considered: Vec<ClusterVerdict>,
    pub reason: RouteReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Routing {
    Routed { decision: RoutingDecision },
    /// Every cluster refused; the job waits in the overflow queue.
    Parked { considered: Vec<ClusterVerdict> },
}

impl Routing {
    pub fn chosen_cluster(&self) -> Option<&ClusterId> {
        match self {
            Routing::Routed { decision } => Some(&decision.chosen_cluster),
            Routing::Parked { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub job_id: JobId,
    pub routing: Routing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterDescriptor {
    pub cluster_id: ClusterId,
    pub display_name: String,
    pub agent_ids: Vec<AgentId>,
    pub submission_limit: SubmissionLimit,
    pub total_capacity: ResourceVector,
}

/// Tick-local scheduling state.
#[derive(Default)]
struct TickState {
    round: RoundState,
    /// Clusters where, without backfill, a blocked head stops everyone else
    /// for the rest of the tick.
    blocked: BTreeSet<ClusterId>,
}

impl Master {
    fn agent_can_hold(&self, cluster: &ClusterId, request: &ResourceVector) -> bool {
        self.agents
            .values()
            .any(|a| a.is_active() && &a.cluster_id == cluster && request.fits(&a.total))
    }

    fn cluster_limit(&self, cluster: &ClusterId) -> u32 {
        self.clusters
            .get(cluster)
            .map(|c| c.limit)
            .unwrap_or_else(|| self.config.policy.limit_for(cluster))
    }

    /// Admit iff the tenant has fewer active jobs at `cluster` than its limit.
    pub fn check_submission(
        &self,
        tenant: &TenantId,
        cluster: &ClusterId,
    ) -> Result<Verdict, MasterError> {
        if !self.clusters.contains_key(cluster) {
            return Err(MasterError::UnknownCluster(cluster.clone()));
        }
        Ok(Verdict::for_counts(
            self.ledger.active_at(tenant, cluster),
            self.cluster_limit(cluster),
        ))
    }

    /// Clusters in the order routing considers them for this job.
    fn routing_order(&self, spec: &JobSpec) -> Vec<ClusterId> {
        let tenant = &spec.tenant_id;
        let affinity = spec
            .cluster_affinity
            .as_ref()
            .filter(|c| self.clusters.contains_key(*c));
        let mut rest: Vec<(u64, u64, &ClusterId)> = self
            .clusters
            .keys()
            .filter(|c| Some(*c) != affinity)
            .map(|c| {
                (
                    self.ledger.active_at(tenant, c),
                    self.cluster_limit(c) as u64,
                    c,
                )
            })
            .collect();
        // active/limit ascending, compared exactly by cross-multiplication.
        rest.sort_by(|a, b| {
            (a.0 as u128 * b.1 as u128)
                .cmp(&(b.0 as u128 * a.1 as u128))
                .then_with(|| a.2.cmp(b.2))
        });
        affinity
            .into_iter()
            .chain(rest.into_iter().map(|(_, _, c)| c))
            .cloned()
            .collect()
    }

    fn plan_route(&self, job: &JobRecord) -> (Vec<ClusterVerdict>, Option<RouteReason>) {
        let spec = &job.spec;
        let mut considered = Vec::new();
        for cluster_id in self.routing_order(spec) {
            let verdict = if self.agent_can_hold(&cluster_id, &spec.request) {
                Verdict::for_counts(
                    self.ledger.active_at(&spec.tenant_id, &cluster_id),
                    self.cluster_limit(&cluster_id),
                )
            } else {
                Verdict::NoCapacity
            };
            let admit = verdict.is_admit();
            considered.push(ClusterVerdict {
                cluster_id: cluster_id.clone(),
                verdict,
            });
            if admit {
                let reason = if spec.cluster_affinity.as_ref() == Some(&cluster_id) {
                    RouteReason::Affinity
                } else if considered.len() > 1 {
                    RouteReason::Spillover
                } else {
                    RouteReason::LeastPressure
                };
                return (considered, Some(reason));
            }
        }
        (considered, None)
    }

    fn route(&mut self, job_id: JobId, now: Timestamp) -> Routing {
        let job = &self.jobs[&job_id];
        let (considered, reason) = self.plan_route(job);
        match reason {
            Some(reason) => {
                let decision = RoutingDecision {
                    job_id,
                    chosen_cluster: considered.last().expect("admitted").cluster_id.clone(),
                    considered,
                    reason,
                };
                self.emit(
                    now,
                    Event::JobQueued {
                        job_id,
                        decision: decision.clone(),
                    },
                );
                Routing::Routed { decision }
            }
            None => {
                if !self.overflow.contains(&job_id) {
                    self.emit(
                        now,
                        Event::JobParked {
                            job_id,
                            considered: considered.clone(),
                        },
                    );
                }
                Routing::Parked { considered }
            }
        }
    }

    /// Accepts a job and routes it to a cluster, or parks it if every
    /// cluster is at the tenant's limit.
    pub fn submit_job(&mut self, spec: JobSpec, now: Timestamp) -> Result<SubmitReceipt, MasterError> {
        self.check_clock(now)?;
        spec.validate()?;
        if let Some(c) = &spec.cluster_affinity {
            if !self.clusters.contains_key(c) {
                return Err(MasterError::UnknownCluster(c.clone()));
            }
        }
        if !self
            .agents
            .values()
            .any(|a| a.is_active() && spec.request.fits(&a.total))
        {
            return Err(MasterError::RequestUnsatisfiable(spec.request));
        }
        if !self.tenants.contains_key(&spec.tenant_id) {
            let weight = self.config.policy.weight_of(&spec.tenant_id);
            self.emit(
                now,
                Event::TenantRegistered {
                    tenant_id: spec.tenant_id.clone(),
                    weight,
                },
            );
        }
        let job_id = JobId(self.next_job);
        self.emit(
            now,
            Event::JobSubmitted {
                job: JobRecord::new(job_id, spec, now),
            },
        );
        let routing = self.route(job_id, now);
        Ok(SubmitReceipt { job_id, routing })
    }

    pub fn job_status(&self, job_id: JobId) -> Result<JobRecord, MasterError> {
        self.jobs
            .get(&job_id)
            .cloned()
            .ok_or(MasterError::UnknownJob(job_id))
    }

    pub fn cancel_job(&mut self, job_id: JobId, now: Timestamp) -> Result<JobRecord, MasterError> {
        self.check_clock(now)?;
        let job = self.jobs.get(&job_id).ok_or(MasterError::UnknownJob(job_id))?;
        if !matches!(job.state, JobState::Submitted | JobState::Queued) {
            return Err(MasterError::NotCancellable {
                job_id,
                state: job.state,
            });
        }
        self.emit(now, Event::JobCancelled { job_id });
        Ok(self.jobs[&job_id].clone())
    }

    pub fn list_jobs(&self, tenant: Option<&TenantId>) -> Vec<JobRecord> {
        self.jobs
            .values()
            .filter(|j| tenant.is_none_or(|t| &j.spec.tenant_id == t))
            .cloned()
            .collect()
    }

    pub fn clusters(&self) -> Vec<ClusterDescriptor> {
        self.clusters
            .iter()
            .map(|(id, info)| {
                let members: Vec<_> = self.agents.values().filter(|a| &a.cluster_id == id).collect();
                ClusterDescriptor {
                    cluster_id: id.clone(),
                    display_name: info.display_name.clone(),
                    agent_ids: members.iter().map(|a| a.agent_id).collect(),
                    submission_limit: SubmissionLimit {
                        cluster_id: id.clone(),
                        max_active_per_tenant: info.limit,
                    },
                    total_capacity: members.iter().map(|a| a.total).sum(),
                }
            })
            .collect()
    }

    /// Sum of ACTIVE agent capacity; the fair-share normalizer.
    pub fn active_capacity(&self) -> ResourceVector {
        self.agents
            .values()
            .filter(|a| a.is_active())
            .map(|a| a.total)
            .sum()
    }

    /// Every tenant by ascending weighted dominant usage.
    pub fn fair_share_order(&self) -> Vec<TenantId> {
        fair_share_rank(&self.ledger, self.tenants.values(), &self.active_capacity())
    }

    /// Tenant order used for offers at each cluster under the current policy.
    pub fn tenant_orders(&self) -> BTreeMap<ClusterId, Vec<TenantId>> {
        match self.config.policy.ordering {
            TenantOrdering::Fairshare => {
                let order = self.fair_share_order();
                self.clusters
                    .keys()
                    .map(|c| (c.clone(), order.clone()))
                    .collect()
            }
            TenantOrdering::Fcfs => self.fcfs_orders(),
        }
    }

    /// Per cluster: tenants by their oldest queued job there.
    fn fcfs_orders(&self) -> BTreeMap<ClusterId, Vec<TenantId>> {
        self.queued
            .iter()
            .map(|(cluster, queue)| {
                let mut seen = BTreeSet::new();
                let order = queue
                    .iter()
                    .map(|(_, j)| &self.jobs[j].spec.tenant_id)
                    .filter(|t| seen.insert(*t))
                    .cloned()
                    .collect();
                (cluster.clone(), order)
            })
            .collect()
    }

    /// One scheduling round at `now`. Returns the records it produced.
    pub fn tick(&mut self, now: Timestamp) -> Result<Vec<LogRecord>, MasterError> {
        self.check_clock(now)?;
        let start = self.journal.len();
        self.sweep(now)?;
        let due: Vec<JobId> = self
            .pending_starts
            .iter()
            .filter(|(_, at)| **at <= now)
            .map(|(j, _)| *j)
            .collect();
        for job_id in due {
            self.emit(now, Event::JobRunning { job_id });
        }
        if !self.queued.is_empty() && self.ledger.last_decay_at < now {
            self.emit(now, Event::LedgerDecayed {});
        }
        self.refresh_reservations(now);
        self.serve_offers(now)?;
        for job_id in self.overflow.clone() {
            if self.jobs[&job_id].state == JobState::Submitted {
                self.route(job_id, now);
            }
        }
        Ok(self.journal[start..].to_vec())
    }

    /// Expected release time of everything placed on `agent`.
    fn releases_on(&self, agent: AgentId, now: Timestamp) -> Vec<Release> {
        let Some(placed) = self.placed.get(&agent) else {
            return Vec::new();
        };
        placed
            .iter()
            .map(|j| {
                let job = &self.jobs[j];
                let started = job
                    .t_start
                    .or_else(|| self.pending_starts.get(j).copied())
                    .unwrap_or(now);
                Release {
                    request: job.spec.request,
                    est_finish_at: (started + job.spec.est_duration_s).max(now),
                }
            })
            .collect()
    }

    /// Earliest slot for `job_id` over the cluster's ACTIVE agents, ties by
    /// agent id. `pending` are launches about to happen on `offered`.
    fn plan_reservation(
        &self,
        cluster: &ClusterId,
        job_id: JobId,
        offered: Option<AgentId>,
        pending: &[(JobId, ResourceVector)],
        now: Timestamp,
    ) -> Option<Reservation> {
        let request = self.jobs[&job_id].spec.request;
        let mut best: Option<Reservation> = None;
        for agent in self.agents.values() {
            if !agent.is_active() || &agent.cluster_id != cluster {
                continue;
            }
            let mut running = self.releases_on(agent.agent_id, now);
            if offered == Some(agent.agent_id) {
                running.extend(pending.iter().map(|(j, r)| Release {
                    request: *r,
                    est_finish_at: now + self.jobs[j].spec.est_duration_s,
                }));
            }
            let Ok(slot) = earliest_start(&request, &running, &agent.total, now) else {
                continue;
            };
            if best.as_ref().is_none_or(|b| slot.start_at < b.start_at) {
                best = Some(Reservation {
                    cluster_id: cluster.clone(),
                    job_id,
                    agent_id: agent.agent_id,
                    start_at: slot.start_at,
                    resources: request,
                    shadow_free: slot.shadow_free,
                });
            }
        }
        best
    }

    /// Recomputes held reservations from fresh estimates, dropping those
    /// whose job has left the queue.
    fn refresh_reservations(&mut self, now: Timestamp) {
        let held: Vec<Reservation> = self.reservations.values().cloned().collect();
        let backfill = self.config.policy.backfill;
        for res in held {
            let job = &self.jobs[&res.job_id];
            let still_queued = job.state == JobState::Queued
                && job.cluster_id.as_ref() == Some(&res.cluster_id);
            let fresh = if still_queued && backfill == BackfillMode::Easy {
                self.plan_reservation(&res.cluster_id, res.job_id, None, &[], now)
            } else {
                None
            };
            match fresh {
                Some(r) if r == res => {}
                Some(reservation) => self.emit(now, Event::ReservationSet { reservation }),
                None => self.emit(
                    now,
                    Event::ReservationCleared {
                        cluster_id: res.cluster_id,
                    },
                ),
            }
        }
    }

    fn serve_offers(&mut self, now: Timestamp) -> Result<(), MasterError> {
        let mut state = TickState::default();
        let fairshare = match self.config.policy.ordering {
            TenantOrdering::Fairshare => Some(self.fair_share_order()),
            TenantOrdering::Fcfs => None,
        };
        loop {
            let orders = match &fairshare {
                Some(order) => self
                    .clusters
                    .keys()
                    .map(|c| (c.clone(), order.clone()))
                    .collect(),
                None => self.fcfs_orders(),
            };
            let offers = self.generate_offers_with(
                |c| orders.get(c).map(Vec::as_slice).unwrap_or(&[]),
                &state.round,
                now,
            );
            if offers.is_empty() {
                return Ok(());
            }
            for offer in offers {
                self.serve_offer(offer, &mut state, now)?;
            }
        }
    }

    /// Whether launching `candidate` on `agent`, on top of what is placed
    /// there and `pending`, still lets the reservation holder start by its
    /// reserved time.
    fn keeps_reservation(
        &self,
        agent: AgentId,
        (holder, start_at): (JobId, Timestamp),
        pending: &[(JobId, ResourceVector)],
        candidate: (JobId, ResourceVector),
        now: Timestamp,
    ) -> bool {
        let mut running = self.releases_on(agent, now);
        running.extend(pending.iter().chain([&candidate]).map(|(j, r)| Release {
            request: *r,
            est_finish_at: now + self.jobs[j].spec.est_duration_s,
        }));
        let request = self.jobs[&holder].spec.request;
        earliest_start(&request, &running, &self.agents[&agent].total, now)
            .is_ok_and(|slot| slot.start_at <= start_at)
    }

    fn fits_elsewhere(&self, cluster: &ClusterId, except: AgentId, request: &ResourceVector) -> bool {
        self.agents.values().any(|a| {
            a.is_active()
                && &a.cluster_id == cluster
                && a.agent_id != except
                && request.fits(&a.free())
        })
    }

    /// The addressed tenant walks its queue at the offer's cluster: jobs
    /// launch in order while they fit; the first one that does not becomes
    /// the blocked head. With backfill on, the head may take the cluster's
    /// reservation and later jobs keep launching if they leave it intact.
    fn serve_offer(&mut self, offer: Offer, state: &mut TickState, now: Timestamp) -> Result<(), MasterError> {
        let cluster = offer.cluster_id.clone();
        let tenant = offer.tenant_id.clone();
        let easy = self.config.policy.backfill == BackfillMode::Easy;
        let mut launches: Vec<(JobId, ResourceVector)> = Vec::new();
        let mut new_reservation: Option<Reservation> = None;
        let mut cutover = false;

        if easy || !state.blocked.contains(&cluster) {
            let queue: Vec<JobId> = self
                .queued
                .get(&cluster)
                .into_iter()
                .flatten()
                .map(|(_, j)| *j)
                .filter(|j| self.jobs[j].spec.tenant_id == tenant)
                .collect();
            let mut free = offer.resources;
            let mut reserved = self
                .reservations
                .get(&cluster)
                .filter(|r| r.agent_id == offer.agent_id)
                .map(|r| (r.job_id, r.start_at));
            let mut head_seen = false;
            for job_id in queue {
                let request = self.jobs[&job_id].spec.request;
                let fits = request.fits(&free);
                let admitted = match reserved {
                    Some((holder, start_at)) if fits && holder != job_id => self.keeps_reservation(
                        offer.agent_id,
                        (holder, start_at),
                        &launches,
                        (job_id, request),
                        now,
                    ),
                    _ => true,
                };
                if fits && admitted {
                    free = free.checked_sub(&request)?;
                    launches.push((job_id, request));
                    continue;
                }
                if !easy {
                    if !self.fits_elsewhere(&cluster, offer.agent_id, &request) {
                        state.blocked.insert(cluster.clone());
                    }
                    break;
                }
                if head_seen {
                    continue;
                }
                head_seen = true;
                if fits
                    || self.reservations.contains_key(&cluster)
                    || self.fits_elsewhere(&cluster, offer.agent_id, &request)
                {
                    continue;
                }
                let Some(res) =
                    self.plan_reservation(&cluster, job_id, Some(offer.agent_id), &launches, now)
                else {
                    continue;
                };
                if self.backfill_cutover == Some(job_id) {
                    cutover = true;
                    break;
                }
                if res.agent_id == offer.agent_id {
                    reserved = Some((job_id, res.start_at));
                }
                new_reservation = Some(res);
            }
        }

        if let Some(reservation) = new_reservation {
            self.emit(now, Event::ReservationSet { reservation });
        }
        if cutover {
            self.config.policy.backfill = BackfillMode::Off;
            let held: Vec<ClusterId> = self.reservations.keys().cloned().collect();
            for cluster_id in held {
                self.emit(now, Event::ReservationCleared { cluster_id });
            }
            state.blocked.insert(cluster.clone());
        }
        if launches.is_empty() {
            self.decline_offer(offer.offer_id, 0, now)?;
            state.round.declined.insert((offer.agent_id, tenant));
            return Ok(());
        }
        self.accept_offer(offer.offer_id, &launches, now)?;
        if let Some(res) = self.reservations.get(&cluster) {
            if launches.iter().any(|(j, _)| *j == res.job_id) {
                self.emit(now, Event::ReservationCleared { cluster_id: cluster });
            }
        }
        state.round.declined.retain(|(_, t)| *t != tenant);
        Ok(())
    }
}
