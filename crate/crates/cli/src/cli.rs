//! The `metasched` command line.
//!
//! Exit codes: 0 on success, 1 when the caller is at fault (usage, bad
//! input, unknown job, rejected request), 2 on server or I/O failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use metasched_core::sim::{compare_policies, run_simulation, NamedPolicy, SimConfig, SimError};
use metasched_core::{ClusterId, Cpus, JobSpec, ResourceVector, TenantId};
use serde_json::{json, Map, Value};

use crate::client::{Client, ClientError};
use crate::config::{ConfigError, ServiceConfig};
use crate::server::serve;
use crate::service::{parse_job_id, ServiceError};
use crate::wire::{MsgType, WireMessage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_SERVER: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "metasched", version, about = "Multi-cluster meta-scheduler")]
pub struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// Service address for client commands.
    #[arg(long, global = true, env = "METASCHED_SERVER", default_value = "127.0.0.1:7070")]
    pub server: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the service.
    Serve {
        /// Service config; defaults to $METASCHED_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Submit a job.
    Submit {
        #[arg(long)]
        tenant: String,
        #[arg(long)]
        cpus: f64,
        #[arg(long = "mem-mb")]
        mem_mb: u64,
        #[arg(long = "disk-mb", default_value_t = 0)]
        disk_mb: u64,
        #[arg(long = "est-seconds")]
        est_seconds: u64,
        #[arg(long = "cmd")]
        command: String,
        /// Preferred cluster.
        #[arg(long)]
        cluster: Option<String>,
    },
    /// Show one job.
    Status { job_id: String },
    /// Cancel a job that has not launched yet.
    Cancel { job_id: String },
    /// List jobs.
    Jobs {
        #[arg(long)]
        tenant: Option<String>,
    },
    /// List clusters.
    Clusters,
    /// List agents.
    Agents,
    /// Run a simulation, optionally comparing policies.
    Sim {
        /// Simulation config; defaults to $METASCHED_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated policy presets, baseline first.
        #[arg(long, value_delimiter = ',')]
        compare: Vec<String>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn user(message: impl ToString) -> Self {
        Failure {
            code: EXIT_USER,
            message: message.to_string(),
        }
    }

    fn server(message: impl ToString) -> Self {
        Failure {
            code: EXIT_SERVER,
            message: message.to_string(),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::server(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::user(e)
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        Failure::server(e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(_) => Failure::user(e),
            _ => Failure::server(e),
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(&ServiceConfig::resolve_path(config.clone())?)?;
            Ok(serve(cfg)?)
        }
        Command::Submit {
            tenant,
            cpus,
            mem_mb,
            disk_mb,
            est_seconds,
            command,
            cluster,
        } => {
            let cpus = Cpus::from_f64(*cpus).map_err(Failure::user)?;
            let spec = JobSpec {
                tenant_id: TenantId::new(tenant.as_str()),
                command: command.clone(),
                request: ResourceVector::new(cpus, *mem_mb, *disk_mb),
                est_duration_s: *est_seconds,
                cluster_affinity: cluster.as_deref().map(ClusterId::new),
            };
            let reply = call(cli, MsgType::Submit, to_map(json!(spec)))?;
            emit(cli, &reply, |p| text(&p["job_id"]))
        }
        Command::Status { job_id } => {
            let id = parse_job_id(job_id).ok_or_else(|| Failure::user(format!("unknown_job: unknown job {job_id}")))?;
            let reply = call(cli, MsgType::Status, to_map(json!({ "job_id": id })))?;
            emit(cli, &reply, |p| job_line(&p["job"]))
        }
        Command::Cancel { job_id } => {
            let id = parse_job_id(job_id).ok_or_else(|| Failure::user(format!("unknown_job: unknown job {job_id}")))?;
            let reply = call(cli, MsgType::Cancel, to_map(json!({ "job_id": id })))?;
            emit(cli, &reply, |p| job_line(&p["job"]))
        }
        Command::Jobs { tenant } => {
            let payload = match tenant {
                Some(t) => to_map(json!({ "tenant_id": t })),
                None => Map::new(),
            };
            let reply = call(cli, MsgType::ListJobs, payload)?;
            emit(cli, &reply, |p| lines(&p["jobs"], job_line))
        }
        Command::Clusters => {
            let reply = call(cli, MsgType::Clusters, Map::new())?;
            emit(cli, &reply, |p| {
                lines(&p["clusters"], |c| {
                    format!(
                        "{}\t{}\tagents={}\tlimit={}",
                        text(&c["cluster_id"]),
                        text(&c["display_name"]),
                        c["agent_ids"].as_array().map_or(0, Vec::len),
                        c["submission_limit"]["max_active_per_tenant"]
                    )
                })
            })
        }
        Command::Agents => {
            let reply = call(cli, MsgType::Agents, Map::new())?;
            emit(cli, &reply, |p| {
                lines(&p["agents"], |a| {
                    format!(
                        "{}\t{}\t{}\t{}\t{}",
                        text(&a["agent_id"]),
                        text(&a["cluster_id"]),
                        text(&a["reachability"]),
                        text(&a["liveness"]),
                        format_args!("{}:{}", text(&a["endpoint"]["host"]), a["endpoint"]["port"])
                    )
                })
            })
        }
        Command::Sim {
            config,
            seed,
            compare,
            report,
        } => simulate(cli, config.clone(), *seed, compare, report.as_ref()),
    }
}

fn simulate(
    cli: &Cli,
    config: Option<PathBuf>,
    seed: Option<u64>,
    compare: &[String],
    report: Option<&PathBuf>,
) -> Result<(), Failure> {
    let path = ServiceConfig::resolve_path(config)?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::user(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: SimConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::user(format!("{} is not a valid simulation config: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (doc, summary) = if compare.is_empty() {
        let out = run_simulation(&cfg)?;
        let m = &out.metrics;
        let summary = format!(
            "seed {} trace {}\njobs {}/{} completed, mean wait {:.1}s, p95 {:.1}s",
            cfg.seed, out.trace_hash, m.jobs_completed, m.jobs_submitted, m.overall.mean_s, m.overall.p95_s
        );
        (json!(out.report()), summary)
    } else {
        let policies = compare
            .iter()
            .map(|name| NamedPolicy::preset(name.trim()))
            .collect::<Result<Vec<_>, _>>()?;
        let cmp = compare_policies(&cfg, &policies)?;
        let mut summary = format!("seed {}", cmp.seed);
        for r in &cmp.runs {
            summary.push_str(&format!(
                "\n{}: trace {} mean wait {:.1}s, completed {}",
                r.name, r.report.trace_hash, r.report.metrics.overall.mean_s, r.report.metrics.jobs_completed
            ));
        }
        for d in &cmp.deltas {
            summary.push_str(&format!("\n{} vs {}: mean wait {:+.1}s", d.name, d.baseline, d.mean_wait_s));
        }
        (json!(cmp), summary)
    };
    if let Some(path) = report {
        let body = serde_json::to_string_pretty(&doc).expect("reports serialize");
        std::fs::write(path, body + "\n")
            .map_err(|e| Failure::server(format!("cannot write {}: {e}", path.display())))?;
    }
    if cli.json {
        println!("{doc}");
    } else {
        println!("{summary}");
    }
    Ok(())
}

fn call(cli: &Cli, kind: MsgType, payload: Map<String, Value>) -> Result<WireMessage, Failure> {
    let mut client = Client::connect(&cli.server)?;
    let reply = client.request(kind, payload)?;
    match reply.error_code() {
        None => Ok(reply),
        Some(code) => {
            let message = reply.payload.get("message").and_then(Value::as_str).unwrap_or("");
            let f = format!("{code}: {message}");
            Err(if code == "internal" { Failure::server(f) } else { Failure::user(f) })
        }
    }
}

fn emit(cli: &Cli, reply: &WireMessage, render: impl Fn(&Value) -> String) -> Result<(), Failure> {
    let payload = Value::Object(reply.payload.clone());
    if cli.json {
        println!("{payload}");
    } else {
        let out = render(&payload);
        if !out.is_empty() {
            println!("{out}");
        }
    }
    Ok(())
}

fn to_map(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn lines(v: &Value, f: impl Fn(&Value) -> String) -> String {
    v.as_array()
        .map(|items| items.iter().map(f).collect::<Vec<_>>().join("\n"))
        .unwrap_or_default()
}

fn job_line(j: &Value) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        text(&j["job_id"]),
        text(&j["state"]),
        text(&j["spec"]["tenant_id"]),
        text(&j["cluster_id"]),
        text(&j["agent_id"])
    )
}
