//! Synthetic bursty workloads of many small jobs.

use serde::{Deserialize, Serialize};

use crate::ids::{ClusterId, TenantId};
use crate::model::{JobSpec, Timestamp};
use crate::resources::ResourceVector;

use super::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Burst {
    pub size: u32,
    pub interval_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadParams {
    pub n_tenants: u32,
    /// Poisson arrival rate per tenant, jobs per second.
    pub arrival_rate: f64,
    #[serde(default)]
    pub burst: Option<Burst>,
    /// Core counts and their relative weights.
    #[serde(default = "default_cpu_choices")]
    pub cpu_choices: Vec<(u64, f64)>,
    #[serde(default = "default_mem_range")]
    pub mem_mb_range: (u64, u64),
    #[serde(default = "default_duration_range")]
    pub duration_s_range: (u64, u64),
    #[serde(default)]
    pub disk_mb: u64,
    /// Estimates are the true duration times a factor drawn from
    /// [1, estimate_error]; 1 means truthful.
    #[serde(default = "default_estimate_error")]
    pub estimate_error: f64,
}

fn default_cpu_choices() -> Vec<(u64, f64)> {
    vec![(1, 0.6), (2, 0.3), (4, 0.1)]
}

fn default_mem_range() -> (u64, u64) {
    (512, 8192)
}

fn default_duration_range() -> (u64, u64) {
    (10, 600)
}

fn default_estimate_error() -> f64 {
    1.0
}

impl WorkloadParams {
    pub fn new(n_tenants: u32, arrival_rate: f64) -> Self {
        WorkloadParams {
            n_tenants,
            arrival_rate,
            burst: None,
            cpu_choices: default_cpu_choices(),
            mem_mb_range: default_mem_range(),
            duration_s_range: default_duration_range(),
            disk_mb: 0,
            estimate_error: default_estimate_error(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_tenants == 0 {
            return Err("n_tenants must be positive".into());
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate > 0.0) {
            return Err("arrival_rate must be positive".into());
        }
        if let Some(b) = self.burst {
            if b.interval_s == 0 {
                return Err("burst interval must be positive".into());
            }
        }
        if self.cpu_choices.is_empty()
            || self.cpu_choices.iter().any(|(c, w)| *c == 0 || w.is_nan() || *w < 0.0)
            || self.cpu_choices.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return Err("cpu_choices need positive cores and a positive total weight".into());
        }
        let (mlo, mhi) = self.mem_mb_range;
        let (dlo, dhi) = self.duration_s_range;
        if mlo == 0 || mlo > mhi || dlo == 0 || dlo > dhi {
            return Err("memory and duration ranges must be positive and ordered".into());
        }
        if !(self.estimate_error.is_finite() && self.estimate_error >= 1.0) {
            return Err("estimate_error must be at least 1".into());
        }
        Ok(())
    }
}

/// One job entering the system.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub at: Timestamp,
    pub spec: JobSpec,
    /// How long the job really runs once started.
    pub actual_duration_s: u64,
}

/// A hand-written job for scripted scenarios.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedJob {
    pub at: Timestamp,
    pub tenant_id: TenantId,
    pub request: ResourceVector,
    pub est_duration_s: u64,
    /// Defaults to the estimate.
    #[serde(default)]
    pub actual_duration_s: Option<u64>,
    #[serde(default)]
    pub cluster_affinity: Option<ClusterId>,
}

impl ScriptedJob {
    pub fn arrival(&self) -> Arrival {
        Arrival {
            at: self.at,
            spec: JobSpec {
                tenant_id: self.tenant_id.clone(),
                command: "sim".into(),
                request: self.request,
                est_duration_s: self.est_duration_s,
                cluster_affinity: self.cluster_affinity.clone(),
            },
            actual_duration_s: self.actual_duration_s.unwrap_or(self.est_duration_s),
        }
    }
}

pub fn tenant_name(i: u32) -> TenantId {
    TenantId::new(format!("tenant-{i:02}"))
}

fn sample_job(params: &WorkloadParams, rng: &mut SimRng, tenant: TenantId, at: Timestamp) -> Arrival {
    let weights: Vec<f64> = params.cpu_choices.iter().map(|(_, w)| *w).collect();
    let cores = params.cpu_choices[rng.weighted(&weights)].0;
    let (mlo, mhi) = params.mem_mb_range;
    let mem_mb = (rng.log_uniform(mlo as f64, mhi as f64).round() as u64).clamp(mlo, mhi);
    let (dlo, dhi) = params.duration_s_range;
    let actual = (rng.log_uniform(dlo as f64, dhi as f64).round() as u64).clamp(dlo, dhi);
    let est = if params.estimate_error > 1.0 {
        let factor = rng.uniform(1.0, params.estimate_error);
        ((actual as f64 * factor).ceil() as u64).max(actual)
    } else {
        actual
    };
    Arrival {
        at,
        spec: JobSpec {
            tenant_id: tenant,
            command: "sim".into(),
            request: ResourceVector::cores(cores, mem_mb, params.disk_mb),
            est_duration_s: est,
            cluster_affinity: None,
        },
        actual_duration_s: actual,
    }
}

/// Arrivals in `[0, horizon_s]`, sorted by time. Each tenant draws a Poisson
/// stream (exponential gaps, floored to whole seconds); bursts add
/// `size` simultaneous jobs at every multiple of the interval, dealt to
/// tenants round-robin. Deterministic in `(params, seed)`.
pub fn generate_workload(params: &WorkloadParams, seed: u64, horizon_s: u64) -> Vec<Arrival> {
    let mut rng = SimRng::new(seed);
    let mut out = Vec::new();
    for i in 0..params.n_tenants {
        let tenant = tenant_name(i);
        let mut t = 0.0;
        loop {
            t += rng.exponential(params.arrival_rate);
            if t > horizon_s as f64 {
                break;
            }
            out.push(sample_job(params, &mut rng, tenant.clone(), t.floor() as u64));
        }
    }
    if let Some(burst) = params.burst {
        let mut dealt = 0u32;
        let mut at = burst.interval_s;
        while at <= horizon_s {
            for _ in 0..burst.size {
                let tenant = tenant_name(dealt % params.n_tenants);
                dealt += 1;
                out.push(sample_job(params, &mut rng, tenant, at));
            }
            at += burst.interval_s;
        }
    }
    out.sort_by_key(|a| a.at);
    out
}
