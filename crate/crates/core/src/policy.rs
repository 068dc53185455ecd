//! Tenant usage accounting, fair-share ranking, submission limits and EASY
//! backfilling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{AgentId, ClusterId, JobId, TenantId};
use crate::model::{JobState, TenantAccount, Timestamp};
use crate::resources::ResourceVector;

pub const DEFAULT_HALF_LIFE_S: f64 = 86_400.0;
pub const DEFAULT_SUBMISSION_LIMIT: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackfillMode {
    #[default]
    Easy,
    Off,
}

/// How tenants are ordered when offers are handed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TenantOrdering {
    /// Ascending weighted dominant usage.
    #[default]
    Fairshare,
    /// Tenant holding the oldest queued job first.
    Fcfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(default = "default_half_life")]
    pub half_life_s: f64,
    #[serde(default)]
    pub weights: BTreeMap<TenantId, f64>,
    #[serde(default)]
    pub limits: BTreeMap<ClusterId, u32>,
    #[serde(default = "default_limit")]
    pub default_limit: u32,
    #[serde(default)]
    pub backfill: BackfillMode,
    #[serde(default)]
    pub ordering: TenantOrdering,
}

fn default_half_life() -> f64 {
    DEFAULT_HALF_LIFE_S
}

fn default_limit() -> u32 {
    DEFAULT_SUBMISSION_LIMIT
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            half_life_s: DEFAULT_HALF_LIFE_S,
            weights: BTreeMap::new(),
            limits: BTreeMap::new(),
            default_limit: DEFAULT_SUBMISSION_LIMIT,
            backfill: BackfillMode::Easy,
            ordering: TenantOrdering::Fairshare,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown tenant {0}")]
    UnknownTenant(TenantId),
    #[error("unknown cluster {0}")]
    UnknownCluster(ClusterId),
    #[error("ledger clock went backwards: {now} < {last}")]
    ClockWentBackwards { now: Timestamp, last: Timestamp },
    #[error("request {request} can never fit in {total}")]
    NeverFits {
        request: ResourceVector,
        total: ResourceVector,
    },
    #[error("head job fits in the currently free resources; launch it directly")]
    HeadFitsNow,
    #[error("running jobs exceed pool capacity")]
    RunningExceedsTotal,
    #[error("unknown policy preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid policy: {0}")]
    Invalid(String),
}

impl PolicyConfig {
    /// Named presets used by policy comparisons.
    pub fn preset(name: &str) -> Result<PolicyConfig, PolicyError> {
        let (ordering, backfill) = match name {
            "fcfs" => (TenantOrdering::Fcfs, BackfillMode::Off),
            "fcfs_backfill" => (TenantOrdering::Fcfs, BackfillMode::Easy),
            "fairshare" => (TenantOrdering::Fairshare, BackfillMode::Off),
            "fairshare_backfill" => (TenantOrdering::Fairshare, BackfillMode::Easy),
            other => return Err(PolicyError::UnknownPreset(other.to_string())),
        };
        Ok(PolicyConfig {
            ordering,
            backfill,
            ..PolicyConfig::default()
        })
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.half_life_s.is_finite() && self.half_life_s > 0.0) {
            return Err(PolicyError::Invalid("half_life_s must be positive".into()));
        }
        if let Some((t, w)) = self.weights.iter().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(PolicyError::Invalid(format!("weight {w} for {t} must be positive")));
        }
        if self.default_limit == 0 || self.limits.values().any(|l| *l == 0) {
            return Err(PolicyError::Invalid("submission limits must be at least 1".into()));
        }
        Ok(())
    }

    pub fn weight_of(&self, tenant: &TenantId) -> f64 {
        self.weights.get(tenant).copied().unwrap_or(1.0)
    }

    pub fn limit_for(&self, cluster: &ClusterId) -> u32 {
        self.limits.get(cluster).copied().unwrap_or(self.default_limit)
    }
}

/// Decayed consumption plus live job counts for one tenant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageVector {
    pub core_seconds: f64,
    pub mem_mb_seconds: f64,
    /// LAUNCHED + RUNNING jobs across all clusters.
    pub running_jobs: u64,
    pub queued_by_cluster: BTreeMap<ClusterId, u64>,
    /// QUEUED + LAUNCHED + RUNNING per cluster; what submission limits count.
    pub active_by_cluster: BTreeMap<ClusterId, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    pub decay_half_life_s: f64,
    pub last_decay_at: Timestamp,
    pub tenants: BTreeMap<TenantId, UsageVector>,
}

fn bump(map: &mut BTreeMap<ClusterId, u64>, key: &ClusterId, delta: i64) {
    let entry = map.entry(key.clone()).or_insert(0);
    *entry = entry.saturating_add_signed(delta);
    if *entry == 0 {
        map.remove(key);
    }
}

impl UsageLedger {
    pub fn new(decay_half_life_s: f64) -> Self {
        UsageLedger {
            decay_half_life_s,
            last_decay_at: 0,
            tenants: BTreeMap::new(),
        }
    }

    pub fn ensure_tenant(&mut self, tenant: &TenantId) {
        self.tenants.entry(tenant.clone()).or_default();
    }

    pub fn usage(&self, tenant: &TenantId) -> Option<&UsageVector> {
        self.tenants.get(tenant)
    }

    /// Multiplies accumulated usage by 2^(-elapsed / half_life). Job counts
    /// are untouched.
    pub fn decay(&mut self, now: Timestamp) -> Result<(), PolicyError> {
        if now < self.last_decay_at {
            return Err(PolicyError::ClockWentBackwards {
                now,
                last: self.last_decay_at,
            });
        }
        if now == self.last_decay_at {
            return Ok(());
        }
        let factor = (-((now - self.last_decay_at) as f64) / self.decay_half_life_s).exp2();
        for usage in self.tenants.values_mut() {
            usage.core_seconds *= factor;
            usage.mem_mb_seconds *= factor;
        }
        self.last_decay_at = now;
        Ok(())
    }

    /// Charges a completed job's actual consumption.
    pub fn record_usage(
        &mut self,
        tenant: &TenantId,
        request: &ResourceVector,
        duration_s: u64,
        now: Timestamp,
    ) -> Result<&UsageVector, PolicyError> {
        if !self.tenants.contains_key(tenant) {
            return Err(PolicyError::UnknownTenant(tenant.clone()));
        }
        self.decay(now)?;
        let usage = self.tenants.get_mut(tenant).expect("checked above");
        usage.core_seconds += request.cpus.as_f64() * duration_s as f64;
        usage.mem_mb_seconds += request.mem_mb as f64 * duration_s as f64;
        Ok(usage)
    }

    /// Keeps the per-tenant job counters in step with a job's state change.
    pub fn note_transition(
        &mut self,
        tenant: &TenantId,
        cluster: Option<&ClusterId>,
        from: Option<JobState>,
        to: JobState,
    ) {
        let usage = self.tenants.entry(tenant.clone()).or_default();
        let mut adjust = |state: JobState, sign: i64| {
            if state.holds_allocation() {
                usage.running_jobs = usage.running_jobs.saturating_add_signed(sign);
            }
            if let Some(c) = cluster {
                if state == JobState::Queued {
                    bump(&mut usage.queued_by_cluster, c, sign);
                }
                if state.is_active() {
                    bump(&mut usage.active_by_cluster, c, sign);
                }
            }
        };
        if let Some(from) = from {
            adjust(from, -1);
        }
        adjust(to, 1);
    }

    pub fn active_at(&self, tenant: &TenantId, cluster: &ClusterId) -> u64 {
        self.tenants
            .get(tenant)
            .and_then(|u| u.active_by_cluster.get(cluster))
            .copied()
            .unwrap_or(0)
    }

    /// Weighted dominant usage of one tenant, normalized by aggregate
    /// capacity and the half-life.
    pub fn weighted_dominant_usage(
        &self,
        tenant: &TenantId,
        weight: f64,
        totals: &ResourceVector,
    ) -> f64 {
        let Some(usage) = self.tenants.get(tenant) else {
            return 0.0;
        };
        dominant_usage(
            usage.core_seconds,
            usage.mem_mb_seconds,
            totals,
            self.decay_half_life_s,
        ) / weight
    }
}

/// max(core_seconds / (cpus·H), mem_mb_seconds / (mem_mb·H)); a dimension
/// with zero capacity contributes nothing.
pub fn dominant_usage(
    core_seconds: f64,
    mem_mb_seconds: f64,
    totals: &ResourceVector,
    half_life_s: f64,
) -> f64 {
    let share = |used: f64, cap: f64| {
        if cap > 0.0 {
            used / (cap * half_life_s)
        } else {
            0.0
        }
    };
    share(core_seconds, totals.cpus.as_f64()).max(share(mem_mb_seconds, totals.mem_mb as f64))
}

/// Tenants in ascending weighted dominant usage; ties by tenant id.
///
/// The ledger is expected to be decayed to the current time.
pub fn fair_share_rank<'a>(
    ledger: &UsageLedger,
    tenants: impl IntoIterator<Item = &'a TenantAccount>,
    totals: &ResourceVector,
) -> Vec<TenantId> {
    let mut scored: Vec<(f64, &TenantId)> = tenants
        .into_iter()
        .map(|t| {
            (
                ledger.weighted_dominant_usage(&t.tenant_id, t.weight, totals),
                &t.tenant_id,
            )
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, t)| t.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionLimit {
    pub cluster_id: ClusterId,
    pub max_active_per_tenant: u32,
}

/// Outcome of evaluating one cluster for one job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Admit,
    Reject { active: u64, limit: u32 },
    NoCapacity,
}

impl Verdict {
    pub fn for_counts(active: u64, limit: u32) -> Verdict {
        if active < limit as u64 {
            Verdict::Admit
        } else {
            Verdict::Reject { active, limit }
        }
    }

    pub fn is_admit(&self) -> bool {
        matches!(self, Verdict::Admit)
    }
}

/// A running job's resources and when it is expected to release them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Release {
    pub request: ResourceVector,
    pub est_finish_at: Timestamp,
}

/// When a blocked job can start and what will be left over at that moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowSlot {
    pub start_at: Timestamp,
    pub resources: ResourceVector,
    /// Free resources at `start_at` after the reserved job takes its share.
    pub shadow_free: ResourceVector,
}

/// EASY reservation held by a cluster's blocked head job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reservation {
    pub cluster_id: ClusterId,
    pub job_id: JobId,
    /// The agent whose release profile yields `start_at`.
    pub agent_id: AgentId,
    pub start_at: Timestamp,
    pub resources: ResourceVector,
    pub shadow_free: ResourceVector,
}

impl Reservation {
    pub fn window(&self) -> BackfillWindow {
        BackfillWindow {
            start_at: self.start_at,
            shadow_free: self.shadow_free,
        }
    }
}

/// Earliest time `request` fits in a pool of capacity `total`, assuming
/// each running job releases its resources at its estimated finish and
/// nothing else starts. Returns `now` if it already fits.
pub fn earliest_start(
    request: &ResourceVector,
    running: &[Release],
    total: &ResourceVector,
    now: Timestamp,
) -> Result<ShadowSlot, PolicyError> {
    if !request.fits(total) {
        return Err(PolicyError::NeverFits {
            request: *request,
            total: *total,
        });
    }
    let mut free = *total;
    for r in running {
        free = free
            .checked_sub(&r.request)
            .map_err(|_| PolicyError::RunningExceedsTotal)?;
    }
    let slot = |start_at, free: ResourceVector| ShadowSlot {
        start_at,
        resources: *request,
        shadow_free: free.checked_sub(request).expect("request fits free"),
    };
    if request.fits(&free) {
        return Ok(slot(now, free));
    }
    let mut releases: Vec<Release> = running
        .iter()
        .map(|r| Release {
            request: r.request,
            est_finish_at: r.est_finish_at.max(now),
        })
        .collect();
    releases.sort_by_key(|r| r.est_finish_at);
    let mut i = 0;
    while i < releases.len() {
        let t = releases[i].est_finish_at;
        while i < releases.len() && releases[i].est_finish_at == t {
            free = free.saturating_add(&releases[i].request);
            i += 1;
        }
        if request.fits(&free) {
            return Ok(slot(t, free));
        }
    }
    // All running jobs released and it still does not fit: impossible since
    // request fits total.
    unreachable!("request fits total but not the fully released pool")
}

/// Shadow reservation for a queue head that does not fit right now.
pub fn compute_reservation(
    head_request: &ResourceVector,
    running: &[Release],
    total: &ResourceVector,
    now: Timestamp,
) -> Result<ShadowSlot, PolicyError> {
    let held: ResourceVector = running.iter().map(|r| r.request).sum();
    let free = total
        .checked_sub(&held)
        .map_err(|_| PolicyError::RunningExceedsTotal)?;
    if head_request.fits(&free) && head_request.fits(total) {
        return Err(PolicyError::HeadFitsNow);
    }
    earliest_start(head_request, running, total, now)
}

/// The EASY admission test against one reservation. Jobs that finish by
/// the reserved start are free to run; longer jobs must fit in what the
/// reserved job leaves over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackfillWindow {
    pub start_at: Timestamp,
    pub shadow_free: ResourceVector,
}

impl BackfillWindow {
    pub fn admits(&self, request: &ResourceVector, est_duration_s: u64, now: Timestamp) -> bool {
        now.saturating_add(est_duration_s) <= self.start_at || request.fits(&self.shadow_free)
    }

    /// Records a job admitted through this window.
    pub fn commit(&mut self, request: &ResourceVector, est_duration_s: u64, now: Timestamp) {
        if now.saturating_add(est_duration_s) > self.start_at {
            self.shadow_free = self
                .shadow_free
                .checked_sub(request)
                .expect("commit only after admits");
        }
    }
}

/// A queued job as seen by the backfill scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub job_id: JobId,
    pub request: ResourceVector,
    pub est_duration_s: u64,
}

/// EASY backfill over a single pool. `queue[0]` is the reserved head and is
/// skipped; later jobs are taken greedily in order.
pub fn backfill_select(
    queue: &[Candidate],
    free: &ResourceVector,
    slot: &ShadowSlot,
    now: Timestamp,
) -> Vec<JobId> {
    let mut free = *free;
    let mut window = BackfillWindow {
        start_at: slot.start_at,
        shadow_free: slot.shadow_free,
    };
    let mut chosen = Vec::new();
    for job in queue.iter().skip(1) {
        if job.request.fits(&free) && window.admits(&job.request, job.est_duration_s, now) {
            free = free.checked_sub(&job.request).expect("fits");
            window.commit(&job.request, job.est_duration_s, now);
            chosen.push(job.job_id);
        }
    }
    chosen
}
