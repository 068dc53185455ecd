use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;

use metasched::client::Client;
use metasched::config::ServiceConfig;
use metasched::server;
use metasched::service::{Service, ServiceError};
use metasched::wire::{decode_message, MsgType, WireMessage};
use metasched_core::events::Event;
use metasched_core::sim::{AgentTemplate, ClusterTemplate};
use metasched_core::snapshot::{encode_snapshot, read_log};
use metasched_core::{ClusterId, JobState, Reachability, ResourceVector};
use serde_json::{json, Map, Value};

fn config(dir: &Path) -> ServiceConfig {
    let cluster = |id: &str, reach| ClusterTemplate {
        cluster_id: ClusterId::new(id),
        display_name: None,
        agents: vec![AgentTemplate {
            total: ResourceVector::cores(4, 8192, 10240),
            reachability: reach,
            count: 2,
        }],
    };
    ServiceConfig {
        listen: "127.0.0.1:0".into(),
        event_log_path: dir.join("events.jsonl"),
        snapshot_path: dir.join("state.snap"),
        policy: Default::default(),
        clusters: vec![
            cluster("chameleon", Reachability::Public),
            cluster("jetstream", Reachability::Public),
            cluster("campus", Reachability::PrivateViaNat),
        ],
        nat: Default::default(),
        tick_period_s: 1,
        heartbeat_period_s: 10,
        snapshot_every: 1000,
        offer_ttl_s: 5,
        liveness_timeout_s: 30,
        max_requeues: 3,
    }
}

fn obj(v: Value) -> Map<String, Value> {
    v.as_object().unwrap().clone()
}

fn submit(tenant: &str, est: u64) -> WireMessage {
    WireMessage::new(
        MsgType::Submit,
        format!("s-{tenant}-{est}"),
        obj(json!({
            "tenant_id": tenant,
            "command": "run",
            "request": {"cpus": 1, "mem_mb": 1024, "disk_mb": 0},
            "est_duration_s": est,
        })),
    )
}

#[test]
fn restart_keeps_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = Service::open(config(dir.path()), 100).unwrap();
    assert_eq!(svc.master().agents().filter(|a| a.is_active()).count(), 6);
    let reply = svc.handle(&submit("ultrascan", 60), 100).unwrap();
    assert_eq!(reply.kind, MsgType::Ok);
    let id = reply.payload["job_id"].as_str().unwrap().to_string();
    svc.tick(101).unwrap();
    let before = encode_snapshot(svc.master());
    drop(svc);

    let mut svc = Service::open(config(dir.path()), 500).unwrap();
    assert_eq!(encode_snapshot(svc.master()), before);
    let status = svc
        .handle(&WireMessage::new(MsgType::Status, "q", obj(json!({"job_id": id}))), 500)
        .unwrap();
    assert_eq!(status.payload["job"]["state"], json!(JobState::Running));
    // Agents were not registered twice and the job finishes after restart.
    svc.tick(500).unwrap();
    assert_eq!(svc.master().agents().count(), 6);
    assert!(svc.master().jobs().all(|j| j.state == JobState::Finished));
}

#[test]
fn error_replies() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = Service::open(config(dir.path()), 0).unwrap();
    let status = |id: Value| WireMessage::new(MsgType::Status, "r", obj(json!({ "job_id": id })));
    let r = svc.handle(&status(json!("job-00000077")), 0).unwrap();
    assert_eq!(r.error_code(), Some("unknown_job"));
    assert_eq!(r.request_id, "r");
    assert_eq!(svc.handle(&status(json!("bogus")), 0).unwrap().error_code(), Some("bad_request"));
    let mut big = submit("t", 10);
    big.payload.insert("request".into(), json!({"cpus": 64, "mem_mb": 1, "disk_mb": 0}));
    assert_eq!(svc.handle(&big, 0).unwrap().error_code(), Some("request_unsatisfiable"));
    let mut no_cmd = submit("t", 10);
    no_cmd.payload.remove("command");
    assert_eq!(svc.handle(&no_cmd, 0).unwrap().error_code(), Some("bad_request"));
    let ok = WireMessage::new(MsgType::Ok, "x", Map::new());
    assert_eq!(svc.handle(&ok, 0).unwrap().error_code(), Some("bad_request"));
}

#[test]
fn listings_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = Service::open(config(dir.path()), 0).unwrap();
    for (i, t) in ["a", "b", "a"].iter().enumerate() {
        svc.handle(&submit(t, 5 + i as u64), 0).unwrap();
    }
    svc.tick(0).unwrap();
    svc.tick(20).unwrap();
    let ask = |svc: &mut Service, kind, p: Value| svc.handle(&WireMessage::new(kind, "l", obj(p)), 20).unwrap();
    let jobs = ask(&mut svc, MsgType::ListJobs, json!({"tenant_id": "a"}));
    assert_eq!(jobs.payload["jobs"].as_array().unwrap().len(), 2);
    let clusters = ask(&mut svc, MsgType::Clusters, json!({}));
    assert_eq!(clusters.payload["clusters"].as_array().unwrap().len(), 3);
    let agents = ask(&mut svc, MsgType::Agents, json!({}));
    assert_eq!(agents.payload["agents"].as_array().unwrap().len(), 6);
    assert_eq!(ask(&mut svc, MsgType::Offers, json!({})).kind, MsgType::Ok);
    let metrics = ask(&mut svc, MsgType::Metrics, json!({}));
    assert_eq!(metrics.payload["metrics"]["jobs_completed"], json!(3));
}

#[test]
fn corrupt_log_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let mut svc = Service::open(cfg.clone(), 0).unwrap();
    svc.handle(&submit("t", 5), 0).unwrap();
    drop(svc);
    let mut text = std::fs::read_to_string(&cfg.event_log_path).unwrap();
    let lines = text.lines().count();
    text.push_str("{\"t\":1,\"event\":\n");
    std::fs::write(&cfg.event_log_path, text).unwrap();
    match Service::open(cfg, 1) {
        Err(ServiceError::LogCorrupt { line, .. }) => assert_eq!(line, lines + 1),
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("corrupt log accepted"),
    }
}

#[test]
fn periodic_snapshots_restore_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.snapshot_every = 7;
    let mut svc = Service::open(cfg.clone(), 0).unwrap();
    for i in 0..12 {
        svc.handle(&submit(["x", "y", "z"][i % 3], 3 + i as u64), i as u64).unwrap();
        svc.tick(i as u64).unwrap();
    }
    assert!(cfg.snapshot_path.exists());
    let live = encode_snapshot(svc.master());
    assert_eq!(read_log(&cfg.event_log_path).unwrap(), svc.history());
    drop(svc);
    assert_eq!(encode_snapshot(Service::open(cfg, 50).unwrap().master()), live);
}

fn roundtrip_lines(addr: &str, lines: &[Vec<u8>]) -> Vec<WireMessage> {
    let stream = TcpStream::connect(addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut replies = Vec::new();
    for l in lines {
        writer.write_all(l).unwrap();
        writer.flush().unwrap();
        let mut buf = Vec::new();
        reader.read_until(b'\n', &mut buf).unwrap();
        replies.push(decode_message(&buf).unwrap());
    }
    replies
}

#[test]
fn tcp_server_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let handle = server::spawn(cfg.clone()).unwrap();
    let addr = handle.local_addr().to_string();

    // Bad input gets one bad_request reply each and the connection survives.
    let mut oversize = br#"{"type":"status","request_id":"o","x":""#.to_vec();
    oversize.extend(std::iter::repeat_n(b'a', 2 << 20));
    oversize.extend_from_slice(b"\"}\n");
    let lines = vec![
        b"{oops\n".to_vec(),
        br#"{"type":"frobnicate","request_id":"f"}"#.to_vec().into_iter().chain(*b"\n").collect(),
        oversize,
        br#"{"type":"clusters","request_id":"c"}"#.to_vec().into_iter().chain(*b"\n").collect(),
    ];
    let replies = roundtrip_lines(&addr, &lines);
    assert_eq!(replies[0].error_code(), Some("bad_request"));
    assert_eq!((replies[1].error_code(), replies[1].request_id.as_str()), (Some("bad_request"), "f"));
    assert_eq!(replies[2].error_code(), Some("bad_request"));
    assert_eq!((replies[3].kind, replies[3].request_id.as_str()), (MsgType::Ok, "c"));

    // Concurrent submitters all succeed with distinct ids.
    let ids: Vec<String> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|t| {
                let addr = addr.clone();
                s.spawn(move || {
                    let mut c = Client::connect(&addr).unwrap();
                    (0..10)
                        .map(|i| {
                            let r = c.request(MsgType::Submit, submit(&format!("t{t}"), 30 + i).payload).unwrap();
                            assert_eq!(r.kind, MsgType::Ok, "{r:?}");
                            r.payload["job_id"].as_str().unwrap().to_string()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 40);
    handle.shutdown().unwrap();

    // The log is one total order holding every submission.
    let log = read_log(&cfg.event_log_path).unwrap();
    assert!(log.windows(2).all(|w| w[0].t <= w[1].t));
    let submitted = log.iter().filter(|r| matches!(r.event, Event::JobSubmitted { .. })).count();
    assert_eq!(submitted, 40);

    // And a restarted server still knows every job.
    let handle = server::spawn(cfg).unwrap();
    let mut c = Client::connect(&handle.local_addr().to_string()).unwrap();
    let jobs = c.request(MsgType::ListJobs, Map::new()).unwrap();
    assert_eq!(jobs.payload["jobs"].as_array().unwrap().len(), 40);
    handle.shutdown().unwrap();
}

#[test]
fn fuzzed_sessions_get_one_reply_per_request() {
    let dir = tempfile::tempdir().unwrap();
    let handle = server::spawn(config(dir.path())).unwrap();
    let addr = handle.local_addr().to_string();
    let mut rng = metasched_core::sim::rng::SimRng::new(11);
    let kinds = ["submit", "status", "cancel", "list_jobs", "clusters", "agents", "offers", "metrics", "ok", "zap"];
    let mut lines = Vec::new();
    for i in 0..300 {
        let kind = kinds[(rng.next_u64() % kinds.len() as u64) as usize];
        let line = match rng.next_u64() % 5 {
            0 => format!("{{\"type\":\"{kind}\",\"request_id\":\"r{i}\",\"payload\":"),
            1 => format!("{{\"type\":\"{kind}\",\"request_id\":\"r{i}\",\"payload\":{{\"job_id\":\"job-{:08}\"}}}}", rng.next_u64() % 20),
            _ => format!(
                "{{\"type\":\"{kind}\",\"request_id\":\"r{i}\",\"payload\":{}}}",
                Value::Object(submit("fz", 1 + rng.next_u64() % 20).payload)
            ),
        };
        lines.push(format!("{line}\n").into_bytes());
    }
    let replies = roundtrip_lines(&addr, &lines);
    assert_eq!(replies.len(), lines.len());
    for (i, (line, r)) in lines.iter().zip(&replies).enumerate() {
        // Malformed lines cannot always be matched; every other reply echoes its id.
        if serde_json::from_slice::<Value>(line).is_ok() {
            assert_eq!(r.request_id, format!("r{i}"));
        }
        assert!(r.kind == MsgType::Ok || r.kind == MsgType::Error);
    }
    handle.shutdown().unwrap();
}
