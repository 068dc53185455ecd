//! Post-hoc safety audit of an event trace.
//!
//! Rebuilds per-agent allocation and per-tenant active counts from the raw
//! records, independently of the master's own bookkeeping, and checks them
//! at every record.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::events::{Event, LogRecord};
use crate::ids::{AgentId, ClusterId, JobId, TenantId};
use crate::resources::ResourceVector;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records_checked: usize,
    pub violations: Vec<String>,
    /// Highest active count any tenant reached at each cluster.
    pub peak_active: BTreeMap<ClusterId, u64>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct AgentBook {
    total: ResourceVector,
    allocated: ResourceVector,
}

struct JobBook {
    tenant: TenantId,
    request: ResourceVector,
    cluster: Option<ClusterId>,
    agent: Option<AgentId>,
}

/// Checks, at every record: allocated ≤ total on every agent; every offer
/// carries exactly total − allocated of its agent; no tenant exceeds a
/// cluster's submission limit.
pub fn audit_trace(trace: &[LogRecord]) -> AuditReport {
    let mut report = AuditReport::default();
    let mut agents: BTreeMap<AgentId, AgentBook> = BTreeMap::new();
    let mut jobs: BTreeMap<JobId, JobBook> = BTreeMap::new();
    let mut limits: BTreeMap<ClusterId, u32> = BTreeMap::new();
    let mut active: BTreeMap<(TenantId, ClusterId), u64> = BTreeMap::new();

    for (i, r) in trace.iter().enumerate() {
        let mut flag = |msg: String| report.violations.push(format!("record {i} (t={}): {msg}", r.t));
        let mut touched: Option<(TenantId, ClusterId)> = None;
        match &r.event {
            Event::ClusterDefined {
                cluster_id, limit, ..
            } => {
                limits.insert(cluster_id.clone(), *limit);
            }
            Event::AgentRegistered { agent } => {
                agents.insert(
                    agent.agent_id,
                    AgentBook {
                        total: agent.total,
                        allocated: agent.allocated,
                    },
                );
            }
            Event::OfferIssued { offer } => {
                match agents.get(&offer.agent_id) {
                    Some(a) => match a.total.checked_sub(&a.allocated) {
                        Ok(free) if free == offer.resources => {}
                        _ => flag(format!(
                            "{} offers {} but agent has total {} allocated {}",
                            offer.offer_id, offer.resources, a.total, a.allocated
                        )),
                    },
                    None => flag(format!("offer on unknown agent {}", offer.agent_id)),
                }
            }
            Event::JobSubmitted { job } => {
                jobs.insert(
                    job.job_id,
                    JobBook {
                        tenant: job.spec.tenant_id.clone(),
                        request: job.spec.request,
                        cluster: None,
                        agent: None,
                    },
                );
            }
            Event::JobQueued { job_id, decision } => {
                if let Some(j) = jobs.get_mut(job_id) {
                    j.cluster = Some(decision.chosen_cluster.clone());
                    let key = (j.tenant.clone(), decision.chosen_cluster.clone());
                    *active.entry(key.clone()).or_insert(0) += 1;
                    touched = Some(key);
                } else {
                    flag(format!("queued unknown job {job_id}"));
                }
            }
            Event::JobRequeued { job_id } => {
                if let Some(j) = jobs.get(job_id) {
                    if let Some(c) = &j.cluster {
                        let key = (j.tenant.clone(), c.clone());
                        *active.entry(key.clone()).or_insert(0) += 1;
                        touched = Some(key);
                    }
                }
            }
            Event::JobLaunched {
                job_id,
                agent_id,
                request,
                ..
            } => match (jobs.get_mut(job_id), agents.get_mut(agent_id)) {
                (Some(j), Some(a)) => {
                    j.agent = Some(*agent_id);
                    if *request != j.request {
                        flag(format!("{job_id} launched with {request}, asked {}", j.request));
                    }
                    a.allocated = a.allocated.saturating_add(request);
                    if !a.allocated.fits(&a.total) {
                        flag(format!(
                            "agent {agent_id} allocated {} exceeds total {}",
                            a.allocated, a.total
                        ));
                    }
                }
                _ => flag(format!("launch of {job_id} on {agent_id} references unknown ids")),
            },
            Event::JobCompleted { job_id, .. } | Event::JobLost { job_id, .. } => {
                if let Some(j) = jobs.get_mut(job_id) {
                    match j.agent.take().and_then(|a| agents.get_mut(&a).map(|b| (a, b))) {
                        Some((agent_id, a)) => match a.allocated.checked_sub(&j.request) {
                            Ok(left) => a.allocated = left,
                            Err(_) => flag(format!("agent {agent_id} released more than it held")),
                        },
                        None => flag(format!("{job_id} released without a placement")),
                    }
                    if let Some(c) = &j.cluster {
                        if let Some(n) = active.get_mut(&(j.tenant.clone(), c.clone())) {
                            *n = n.saturating_sub(1);
                        }
                    }
                }
            }
            Event::JobCancelled { job_id } => {
                if let Some(j) = jobs.get(job_id) {
                    if let Some(c) = &j.cluster {
                        if let Some(n) = active.get_mut(&(j.tenant.clone(), c.clone())) {
                            *n = n.saturating_sub(1);
                        }
                    }
                }
            }
            _ => {}
        }
        if let Some(key) = touched {
            let n = active[&key];
            let peak = report.peak_active.entry(key.1.clone()).or_insert(0);
            *peak = (*peak).max(n);
            if let Some(limit) = limits.get(&key.1) {
                if n > *limit as u64 {
                    report.violations.push(format!(
                        "record {i} (t={}): tenant {} has {n} active at {} over limit {limit}",
                        r.t, key.0, key.1
                    ));
                }
            }
        }
        report.records_checked += 1;
    }
    report
}
