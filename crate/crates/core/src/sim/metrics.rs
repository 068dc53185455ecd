//! Wait-time and utilization metrics, derived purely from an event trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::events::{Event, LogRecord, Outcome};
use crate::ids::{AgentId, ClusterId, JobId, TenantId};
use crate::model::Timestamp;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WaitStats {
    pub jobs: u64,
    pub mean_s: f64,
    pub median_s: f64,
    /// Nearest-rank 95th percentile.
    pub p95_s: f64,
}

impl WaitStats {
    pub fn from_waits(waits: &[u64]) -> WaitStats {
        if waits.is_empty() {
            return WaitStats::default();
        }
        let mut sorted = waits.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let mean_s = sorted.iter().sum::<u64>() as f64 / n as f64;
        let median_s = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        WaitStats {
            jobs: n as u64,
            mean_s,
            median_s,
            p95_s: sorted[rank - 1] as f64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub horizon_s: Timestamp,
    pub overall: WaitStats,
    pub per_tenant: BTreeMap<TenantId, WaitStats>,
    /// Time-averaged fraction of each cluster's cpus that was allocated.
    pub utilization: BTreeMap<ClusterId, f64>,
    pub jobs_submitted: u64,
    pub jobs_completed: u64,
    pub jobs_failed: u64,
    pub jobs_cancelled: u64,
    pub parked_then_recovered: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed trace at record {index}: {message}")]
pub struct TraceMalformed {
    pub index: usize,
    pub message: String,
}

struct JobView {
    tenant: TenantId,
    submitted: Timestamp,
    cpu_centi: u64,
    started: Option<Timestamp>,
    /// Agent and launch time while the job holds an allocation.
    placed: Option<(AgentId, Timestamp)>,
}

fn view<'a>(
    jobs: &'a mut BTreeMap<JobId, JobView>,
    id: &JobId,
    index: usize,
) -> Result<&'a mut JobView, TraceMalformed> {
    jobs.get_mut(id).ok_or_else(|| TraceMalformed {
        index,
        message: format!("unknown job {id}"),
    })
}

/// Computes metrics from a complete trace. The horizon is the time of the
/// `clock_stopped` record, or of the last record if there is none.
pub fn compute_metrics(trace: &[LogRecord]) -> Result<Metrics, TraceMalformed> {
    let mut m = Metrics::default();
    let mut jobs: BTreeMap<JobId, JobView> = BTreeMap::new();
    let mut agents: BTreeMap<AgentId, ClusterId> = BTreeMap::new();
    let mut capacity: BTreeMap<ClusterId, u64> = BTreeMap::new();
    let mut busy: BTreeMap<ClusterId, u128> = BTreeMap::new();
    let mut parked: BTreeSet<JobId> = BTreeSet::new();
    let mut last_t = 0;
    let mut stopped = None;

    for (index, r) in trace.iter().enumerate() {
        let bad = |message: String| TraceMalformed { index, message };
        if r.t < last_t {
            return Err(bad(format!("time went backwards from {last_t} to {}", r.t)));
        }
        last_t = r.t;
        match &r.event {
            Event::ClusterDefined { cluster_id, .. } => {
                capacity.entry(cluster_id.clone()).or_insert(0);
            }
            Event::AgentRegistered { agent } => {
                agents.insert(agent.agent_id, agent.cluster_id.clone());
                *capacity.entry(agent.cluster_id.clone()).or_insert(0) += agent.total.cpus.centi();
            }
            Event::JobSubmitted { job } => {
                m.jobs_submitted += 1;
                jobs.insert(
                    job.job_id,
                    JobView {
                        tenant: job.spec.tenant_id.clone(),
                        submitted: job.t_submit.unwrap_or(r.t),
                        cpu_centi: job.spec.request.cpus.centi(),
                        started: None,
                        placed: None,
                    },
                );
            }
            Event::JobParked { job_id, .. } => {
                view(&mut jobs, job_id, index)?;
                parked.insert(*job_id);
            }
            Event::JobQueued { job_id, .. } => {
                view(&mut jobs, job_id, index)?;
                if parked.remove(job_id) {
                    m.parked_then_recovered += 1;
                }
            }
            Event::JobLaunched {
                job_id, agent_id, ..
            } => {
                if !agents.contains_key(agent_id) {
                    return Err(bad(format!("launch on unknown agent {agent_id}")));
                }
                view(&mut jobs, job_id, index)?.placed = Some((*agent_id, r.t));
            }
            Event::JobRunning { job_id } => view(&mut jobs, job_id, index)?.started = Some(r.t),
            Event::JobCompleted { job_id, .. }
            | Event::JobLost { job_id, .. }
            | Event::JobAbandoned { job_id }
            | Event::JobCancelled { job_id } => {
                let view = view(&mut jobs, job_id, index)?;
                if matches!(r.event, Event::JobCompleted { .. } | Event::JobLost { .. }) {
                    let (agent, since) = view
                        .placed
                        .take()
                        .ok_or_else(|| bad(format!("{job_id} released without a launch")))?;
                    let cluster = agents[&agent].clone();
                    *busy.entry(cluster).or_insert(0) += view.cpu_centi as u128 * (r.t - since) as u128;
                }
                match &r.event {
                    Event::JobCompleted { outcome, .. } => match outcome {
                        Outcome::Finished => m.jobs_completed += 1,
                        Outcome::Failed => m.jobs_failed += 1,
                    },
                    Event::JobAbandoned { .. } => m.jobs_failed += 1,
                    Event::JobCancelled { .. } => m.jobs_cancelled += 1,
                    _ => {}
                }
            }
            Event::JobRequeued { job_id } => view(&mut jobs, job_id, index)?.started = None,
            Event::ClockStopped {} => stopped = Some(r.t),
            _ => {}
        }
    }

    let horizon = stopped.unwrap_or(last_t);
    m.horizon_s = horizon;
    // Jobs still holding resources at the horizon count up to it.
    for view in jobs.values() {
        if let Some((agent, since)) = view.placed {
            let cluster = agents[&agent].clone();
            *busy.entry(cluster).or_insert(0) +=
                view.cpu_centi as u128 * horizon.saturating_sub(since) as u128;
        }
    }
    for (cluster, cap) in &capacity {
        let used = busy.get(cluster).copied().unwrap_or(0);
        let u = if *cap == 0 || horizon == 0 {
            0.0
        } else {
            (used as f64 / (*cap as f64 * horizon as f64)).min(1.0)
        };
        m.utilization.insert(cluster.clone(), u);
    }

    let mut all = Vec::new();
    let mut by_tenant: BTreeMap<TenantId, Vec<u64>> = BTreeMap::new();
    for view in jobs.values() {
        if let Some(start) = view.started {
            let wait = start.saturating_sub(view.submitted);
            all.push(wait);
            by_tenant.entry(view.tenant.clone()).or_default().push(wait);
        }
    }
    m.overall = WaitStats::from_waits(&all);
    m.per_tenant = by_tenant
        .into_iter()
        .map(|(t, w)| (t, WaitStats::from_waits(&w)))
        .collect();
    Ok(m)
}
