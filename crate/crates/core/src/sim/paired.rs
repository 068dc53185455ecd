//! Paired runs for the EASY no-head-delay property.
//!
//! For every job that ever holds a backfill reservation, the run is forked
//! just before that job is first reserved and continued with backfilling
//! switched off at the moment the reservation would have been taken. Both
//! runs share everything up to that point, so the job's start with
//! backfilling must not be later than its start in the in-order
//! continuation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::events::Event;
use crate::ids::JobId;
use crate::model::Timestamp;
use crate::policy::BackfillMode;

use super::audit::{audit_trace, AuditReport};
use super::harness::{run_simulation, SimConfig, SimError, Simulation};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadCheck {
    pub job_id: JobId,
    /// When the job first took its cluster's reservation.
    pub reserved_at: Timestamp,
    /// The start time that reservation promised.
    pub promised_start: Timestamp,
    pub backfill_start: Option<Timestamp>,
    /// Start in the continuation without backfilling.
    pub in_order_start: Option<Timestamp>,
}

impl HeadCheck {
    /// Whether backfilling delayed this job relative to the in-order run.
    pub fn delayed(&self) -> bool {
        match (self.backfill_start, self.in_order_start) {
            (Some(b), Some(f)) => b > f,
            (None, Some(_)) => true,
            (_, None) => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDelayReport {
    pub heads: Vec<HeadCheck>,
    /// Safety audit of the backfilling run itself.
    pub audit: AuditReport,
}

impl HeadDelayReport {
    pub fn violations(&self) -> impl Iterator<Item = &HeadCheck> {
        self.heads.iter().filter(|h| h.delayed())
    }
}

/// Runs `config` (which must have backfilling on) and checks every
/// reserved head job against its in-order continuation.
pub fn check_head_delay(config: &SimConfig) -> Result<HeadDelayReport, SimError> {
    if config.policy.backfill != BackfillMode::Easy {
        return Err(SimError::ConfigInvalid(
            "head-delay check needs backfilling enabled".into(),
        ));
    }
    let outcome = run_simulation(config)?;
    let mut first: BTreeMap<JobId, (Timestamp, Timestamp)> = BTreeMap::new();
    let mut started: BTreeMap<JobId, Timestamp> = BTreeMap::new();
    for r in &outcome.trace {
        match &r.event {
            Event::ReservationSet { reservation } => {
                first
                    .entry(reservation.job_id)
                    .or_insert((r.t, reservation.start_at));
            }
            Event::JobRunning { job_id } => {
                started.insert(*job_id, r.t);
            }
            _ => {}
        }
    }
    let mut report = HeadDelayReport {
        heads: Vec::new(),
        audit: audit_trace(&outcome.trace),
    };
    let mut base = Simulation::new(config.clone())?;
    let mut heads: Vec<_> = first.into_iter().collect();
    heads.sort_by_key(|(job, (at, _))| (*at, *job));
    for (job_id, (reserved_at, promised_start)) in heads {
        while base.peek_time().is_some_and(|t| t < reserved_at) {
            base.step()?;
        }
        let mut fork = base.fork();
        fork.master_mut().set_backfill_cutover(job_id);
        let in_order_start = fork.run_until_started(job_id)?;
        report.heads.push(HeadCheck {
            job_id,
            reserved_at,
            promised_start,
            backfill_start: started.get(&job_id).copied(),
            in_order_start,
        });
    }
    report.heads.sort_by_key(|h| h.job_id);
    Ok(report)
}
