//! Discrete-event simulation driver.
//!
//! Time advances from event to event, where events are job completions,
//! arrivals, agent heartbeats, injected failures and scheduling ticks. When
//! several fall on the same second they are handled in that order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::MasterError;
use crate::events::{trace_hash, Event, LogRecord, Outcome};
use crate::ids::{AgentId, ClusterId, JobId};
use crate::master::{
    Master, MasterConfig, DEFAULT_LIVENESS_TIMEOUT_S, DEFAULT_MAX_REQUEUES, DEFAULT_OFFER_TTL_S,
};
use crate::model::{Endpoint, JobState, Timestamp};
use crate::nat::{NatConfig, NatError};
use crate::offers::Reachability;
use crate::policy::PolicyConfig;
use crate::resources::ResourceVector;

use super::metrics::{compute_metrics, Metrics, TraceMalformed};
use super::workload::{generate_workload, Arrival, ScriptedJob, WorkloadParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTemplate {
    pub total: ResourceVector,
    #[serde(default = "public")]
    pub reachability: Reachability,
    #[serde(default = "one")]
    pub count: u32,
}

fn public() -> Reachability {
    Reachability::Public
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTemplate {
    pub cluster_id: ClusterId,
    #[serde(default)]
    pub display_name: Option<String>,
    pub agents: Vec<AgentTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    Generated(WorkloadParams),
    Scripted { jobs: Vec<ScriptedJob> },
}

/// Crashes one agent (it stops heartbeating and its tasks stop making
/// progress), optionally bringing it back later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentFailure {
    pub cluster_id: ClusterId,
    /// Position of the agent within its cluster's expanded template list.
    pub index: usize,
    pub at: Timestamp,
    #[serde(default)]
    pub recover_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub clusters: Vec<ClusterTemplate>,
    pub workload: Workload,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub nat: NatConfig,
    /// Arrivals stop here; running work is then drained.
    pub duration_s: u64,
    #[serde(default = "default_tick")]
    pub tick_period_s: u64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_period_s: u64,
    #[serde(default = "default_offer_ttl")]
    pub offer_ttl_s: u64,
    #[serde(default = "default_liveness")]
    pub liveness_timeout_s: u64,
    #[serde(default = "default_requeues")]
    pub max_requeues: u32,
    /// Upper bound on the drain phase after `duration_s`.
    #[serde(default = "default_drain")]
    pub drain_limit_s: u64,
    #[serde(default)]
    pub failures: Vec<AgentFailure>,
}

fn default_tick() -> u64 {
    1
}

fn default_heartbeat() -> u64 {
    10
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

fn default_drain() -> u64 {
    86_400
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error(transparent)]
    TraceMalformed(#[from] TraceMalformed),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: &str| Err(SimError::ConfigInvalid(m.into()));
        if self.duration_s == 0 {
            return invalid("duration_s must be positive");
        }
        if self.tick_period_s == 0 || self.heartbeat_period_s == 0 {
            return invalid("tick and heartbeat periods must be positive");
        }
        if !self
            .clusters
            .iter()
            .any(|c| c.agents.iter().any(|a| a.count > 0))
        {
            return invalid("at least one cluster needs an agent");
        }
        let mut ids = BTreeSet::new();
        for c in &self.clusters {
            if !ids.insert(&c.cluster_id) {
                return invalid("duplicate cluster id");
            }
        }
        if self.heartbeat_period_s >= self.liveness_timeout_s {
            return invalid("heartbeat period must be shorter than the liveness timeout");
        }
        if let Workload::Generated(p) = &self.workload {
            p.validate().map_err(SimError::ConfigInvalid)?;
        }
        self.policy
            .validate()
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }

    pub fn master_config(&self) -> MasterConfig {
        MasterConfig {
            offer_ttl_s: self.offer_ttl_s,
            liveness_timeout_s: self.liveness_timeout_s,
            max_requeues: self.max_requeues,
            policy: self.policy.clone(),
            nat: self.nat.clone(),
        }
    }

    pub fn arrivals(&self) -> Vec<Arrival> {
        match &self.workload {
            Workload::Generated(p) => generate_workload(p, self.seed, self.duration_s),
            Workload::Scripted { jobs } => {
                let mut a: Vec<Arrival> = jobs
                    .iter()
                    .filter(|j| j.at <= self.duration_s)
                    .map(ScriptedJob::arrival)
                    .collect();
                a.sort_by_key(|x| x.at);
                a
            }
        }
    }
}

#[derive(Debug, Clone)]
struct SimAgent {
    cluster_id: ClusterId,
    index: usize,
    total: ResourceVector,
    reachability: Reachability,
    endpoint: Endpoint,
    agent_id: Option<AgentId>,
    down: bool,
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: Vec<LogRecord>,
    pub metrics: Metrics,
    pub trace_hash: String,
    /// Submissions the master refused outright.
    pub rejected: Vec<String>,
    /// Agents whose registration failed (for example, NAT disabled).
    pub unregistered_agents: usize,
    pub master: Master,
}

/// The report written for a run: metrics plus the trace hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub trace_hash: String,
}

impl SimOutcome {
    pub fn report(&self) -> SimReport {
        SimReport {
            metrics: self.metrics.clone(),
            trace_hash: self.trace_hash.clone(),
        }
    }
}

/// A simulation in progress. Cloning forks it.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: SimConfig,
    master: Master,
    arrivals: Vec<Arrival>,
    next_arrival: usize,
    actual: BTreeMap<JobId, u64>,
    completions: BTreeSet<(Timestamp, JobId)>,
    completion_of: BTreeMap<JobId, Timestamp>,
    agents: Vec<SimAgent>,
    trace: Vec<LogRecord>,
    rejected: Vec<String>,
    now: Timestamp,
    next_tick: Timestamp,
    next_heartbeat: Timestamp,
    done: bool,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Simulation, SimError> {
        config.validate()?;
        let master = Master::new(config.master_config())?;
        let arrivals = config.arrivals();
        let mut agents = Vec::new();
        for (ci, cluster) in config.clusters.iter().enumerate() {
            let mut index = 0;
            for template in &cluster.agents {
                for _ in 0..template.count {
                    let host = match template.reachability {
                        Reachability::Public => format!("198.51.{}.{}", ci + 1, index + 1),
                        Reachability::PrivateViaNat => format!("10.{}.0.{}", ci + 1, index + 1),
                    };
                    agents.push(SimAgent {
                        cluster_id: cluster.cluster_id.clone(),
                        index,
                        total: template.total,
                        reachability: template.reachability,
                        endpoint: Endpoint::parse(&host, 5051)
                            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?,
                        agent_id: None,
                        down: false,
                    });
                    index += 1;
                }
            }
        }
        let mut sim = Simulation {
            next_tick: 0,
            next_heartbeat: config.heartbeat_period_s,
            config,
            master,
            arrivals,
            next_arrival: 0,
            actual: BTreeMap::new(),
            completions: BTreeSet::new(),
            completion_of: BTreeMap::new(),
            agents,
            trace: Vec::new(),
            rejected: Vec::new(),
            now: 0,
            done: false,
        };
        for c in &sim.config.clusters {
            let name = c.display_name.clone().unwrap_or_else(|| c.cluster_id.to_string());
            sim.master.define_cluster(c.cluster_id.clone(), name, 0)?;
        }
        for i in 0..sim.agents.len() {
            sim.register(i, 0)?;
        }
        sim.collect();
        Ok(sim)
    }

    fn register(&mut self, i: usize, now: Timestamp) -> Result<(), SimError> {
        let a = &self.agents[i];
        let result = match a.reachability {
            Reachability::Public => {
                self.master
                    .register_agent(a.cluster_id.clone(), a.endpoint, a.total, a.reachability, now)
            }
            Reachability::PrivateViaNat => self
                .master
                .register_private_agent(a.cluster_id.clone(), a.endpoint, a.total, now)
                .map(|(id, _)| id),
        };
        match result {
            Ok(id) => self.agents[i].agent_id = Some(id),
            Err(MasterError::Nat(_)) => self.agents[i].agent_id = None,
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    pub fn master(&self) -> &Master {
        &self.master
    }

    pub fn master_mut(&mut self) -> &mut Master {
        &mut self.master
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn trace(&self) -> &[LogRecord] {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Time the next `step` will advance to, or `None` once finished.
    pub fn peek_time(&self) -> Option<Timestamp> {
        (!self.done).then(|| self.next_event_time().max(self.now))
    }

    /// An independent copy of the run that starts with an empty trace.
    pub fn fork(&self) -> Simulation {
        Simulation {
            config: self.config.clone(),
            master: self.master.clone(),
            arrivals: self.arrivals.clone(),
            next_arrival: self.next_arrival,
            actual: self.actual.clone(),
            completions: self.completions.clone(),
            completion_of: self.completion_of.clone(),
            agents: self.agents.clone(),
            trace: Vec::new(),
            rejected: Vec::new(),
            now: self.now,
            next_tick: self.next_tick,
            next_heartbeat: self.next_heartbeat,
            done: self.done,
        }
    }

    /// Moves freshly journaled records into the trace, scheduling
    /// completions for tasks that started.
    fn collect(&mut self) {
        for r in self.master.drain_journal() {
            match &r.event {
                Event::JobRunning { job_id } => {
                    let agent = self.master.job(*job_id).and_then(|j| j.agent_id);
                    let agent_down = self
                        .agents
                        .iter()
                        .any(|a| a.down && a.agent_id.is_some() && a.agent_id == agent);
                    if !agent_down {
                        let at = r.t + self.actual.get(job_id).copied().unwrap_or(0);
                        self.completions.insert((at, *job_id));
                        self.completion_of.insert(*job_id, at);
                    }
                }
                Event::JobLost { job_id, .. } => {
                    if let Some(at) = self.completion_of.remove(job_id) {
                        self.completions.remove(&(at, *job_id));
                    }
                }
                _ => {}
            }
            self.trace.push(r);
        }
    }

    fn has_unfinished_work(&self) -> bool {
        self.next_arrival < self.arrivals.len()
            || self.master.jobs().any(|j| !j.state.is_terminal())
    }

    fn next_event_time(&self) -> Timestamp {
        let mut t = self.next_tick.min(self.next_heartbeat);
        if let Some((c, _)) = self.completions.first() {
            t = t.min(*c);
        }
        if let Some(a) = self.arrivals.get(self.next_arrival) {
            t = t.min(a.at);
        }
        for f in &self.config.failures {
            for at in std::iter::once(f.at).chain(f.recover_at) {
                if at > self.now {
                    t = t.min(at);
                }
            }
        }
        t
    }

    fn agent_index(&self, cluster: &ClusterId, index: usize) -> Option<usize> {
        self.agents
            .iter()
            .position(|a| &a.cluster_id == cluster && a.index == index)
    }

    /// Advances to the next event time and handles everything due then.
    /// Returns false once the run has finished.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.done {
            return Ok(false);
        }
        let horizon = self.config.duration_s;
        let limit = horizon + self.config.drain_limit_s;
        if (self.now >= horizon && !self.has_unfinished_work()) || self.now >= limit {
            let stop = self.now.max(horizon);
            self.master.stop_clock(stop)?;
            self.now = stop;
            self.collect();
            self.done = true;
            return Ok(false);
        }
        let t = self.next_event_time().max(self.now);
        self.now = t;

        while let Some(&(at, job_id)) = self.completions.first() {
            if at > t {
                break;
            }
            self.completions.pop_first();
            self.completion_of.remove(&job_id);
            if self.master.job(job_id).map(|j| j.state) == Some(JobState::Running) {
                self.master.complete_task(job_id, Outcome::Finished, t)?;
            }
        }

        for f in self.config.failures.clone() {
            let Some(i) = self.agent_index(&f.cluster_id, f.index) else {
                continue;
            };
            if f.at == t {
                self.agents[i].down = true;
                let stranded: Vec<JobId> = self
                    .master
                    .jobs()
                    .filter(|j| j.agent_id.is_some() && j.agent_id == self.agents[i].agent_id)
                    .map(|j| j.job_id)
                    .collect();
                for j in stranded {
                    if let Some(at) = self.completion_of.remove(&j) {
                        self.completions.remove(&(at, j));
                    }
                }
            }
            if f.recover_at == Some(t) {
                self.agents[i].down = false;
                self.recover(i, t)?;
            }
        }

        if t == self.next_heartbeat {
            for i in 0..self.agents.len() {
                let a = &self.agents[i];
                if a.down {
                    continue;
                }
                if let Some(id) = a.agent_id {
                    match self.master.heartbeat(id, t) {
                        Ok(_) => {}
                        Err(MasterError::Nat(NatError::MappingNotFound)) => self.recover(i, t)?,
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            self.next_heartbeat += self.config.heartbeat_period_s;
        }

        while let Some(a) = self.arrivals.get(self.next_arrival) {
            if a.at > t {
                break;
            }
            let a = a.clone();
            self.next_arrival += 1;
            match self.master.submit_job(a.spec, t) {
                Ok(receipt) => {
                    self.actual.insert(receipt.job_id, a.actual_duration_s);
                }
                Err(e) => self.rejected.push(format!("t={t}: {e}")),
            }
        }

        if t == self.next_tick {
            self.master.tick(t)?;
            self.next_tick += self.config.tick_period_s;
        }
        self.collect();
        Ok(true)
    }

    /// Brings a crashed agent back: a heartbeat if its registration still
    /// stands, otherwise a fresh registration.
    fn recover(&mut self, i: usize, t: Timestamp) -> Result<(), SimError> {
        let Some(id) = self.agents[i].agent_id else {
            return self.register(i, t);
        };
        match self.master.heartbeat(id, t) {
            Ok(_) => Ok(()),
            Err(MasterError::Nat(NatError::MappingNotFound)) => self.register(i, t),
            Err(e) => Err(e.into()),
        }
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    /// Runs until `job` reports RUNNING, returning when it did, or `None`
    /// if the run ends first.
    pub fn run_until_started(&mut self, job: JobId) -> Result<Option<Timestamp>, SimError> {
        loop {
            if let Some(j) = self.master.job(job) {
                if let Some(t) = j.t_start {
                    return Ok(Some(t));
                }
                if j.state.is_terminal() {
                    return Ok(None);
                }
            }
            if !self.step()? {
                return Ok(None);
            }
        }
    }

    pub fn finish(mut self) -> Result<SimOutcome, SimError> {
        self.run_to_end()?;
        let metrics = compute_metrics(&self.trace)?;
        let hash = trace_hash(&self.trace);
        let unregistered_agents = self.agents.iter().filter(|a| a.agent_id.is_none()).count();
        Ok(SimOutcome {
            metrics,
            trace_hash: hash,
            trace: self.trace,
            rejected: self.rejected,
            unregistered_agents,
            master: self.master,
        })
    }
}

/// Builds the scenario, runs it to completion and computes its metrics.
pub fn run_simulation(config: &SimConfig) -> Result<SimOutcome, SimError> {
    Simulation::new(config.clone())?.finish()
}
