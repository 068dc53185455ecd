//! Paired runs of one workload under several policies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::ClusterId;
use crate::policy::PolicyConfig;

use super::harness::{run_simulation, SimConfig, SimError, SimReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPolicy {
    pub name: String,
    pub policy: PolicyConfig,
}

impl NamedPolicy {
    /// A named preset such as `fcfs` or `fairshare_backfill`.
    pub fn preset(name: &str) -> Result<NamedPolicy, SimError> {
        let policy =
            PolicyConfig::preset(name).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        Ok(NamedPolicy {
            name: name.to_string(),
            policy,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRun {
    pub name: String,
    pub policy: PolicyConfig,
    pub report: SimReport,
}

/// A run's metrics minus the baseline (first) run's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDelta {
    pub name: String,
    pub baseline: String,
    pub mean_wait_s: f64,
    pub median_wait_s: f64,
    pub p95_wait_s: f64,
    pub jobs_completed: i64,
    pub utilization: BTreeMap<ClusterId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub runs: Vec<PolicyRun>,
    pub deltas: Vec<MetricsDelta>,
}

impl ComparisonReport {
    pub fn run(&self, name: &str) -> Option<&PolicyRun> {
        self.runs.iter().find(|r| r.name == name)
    }
}

/// Runs the same seeded workload once per policy, in parallel, and reports
/// each run against the first.
pub fn compare_policies(
    config: &SimConfig,
    policies: &[NamedPolicy],
) -> Result<ComparisonReport, SimError> {
    if policies.len() < 2 {
        return Err(SimError::ConfigInvalid(
            "comparison needs at least two policies".into(),
        ));
    }
    let results: Vec<Result<SimReport, SimError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = policies
            .iter()
            .map(|p| {
                let mut cfg = config.clone();
                cfg.policy = p.policy.clone();
                scope.spawn(move || run_simulation(&cfg).map(|o| o.report()))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let mut runs = Vec::with_capacity(policies.len());
    for (p, r) in policies.iter().zip(results) {
        runs.push(PolicyRun {
            name: p.name.clone(),
            policy: p.policy.clone(),
            report: r?,
        });
    }
    let base = &runs[0];
    let deltas = runs[1..]
        .iter()
        .map(|r| {
            let (a, b) = (&r.report.metrics, &base.report.metrics);
            MetricsDelta {
                name: r.name.clone(),
                baseline: base.name.clone(),
                mean_wait_s: a.overall.mean_s - b.overall.mean_s,
                median_wait_s: a.overall.median_s - b.overall.median_s,
                p95_wait_s: a.overall.p95_s - b.overall.p95_s,
                jobs_completed: a.jobs_completed as i64 - b.jobs_completed as i64,
                utilization: a
                    .utilization
                    .iter()
                    .map(|(c, u)| (c.clone(), u - b.utilization.get(c).copied().unwrap_or(0.0)))
                    .collect(),
            }
        })
        .collect();
    Ok(ComparisonReport {
        seed: config.seed,
        runs,
        deltas,
    })
}
